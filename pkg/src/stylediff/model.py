"""The full acoustic model: style encoder, hierarchical encoder, score network."""

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .alignment import binarization_loss, forward_sum_loss, hard_from_durations, regulate_batch, viterbi_align
from .config import DiffusionConfig, ModelConfig
from .diffusion import diffusion_loss, reverse_sample
from .encoder import (Aligner, DurationPredictor, StyleAdaptiveEncoder, TextEncoder, duration_loss,
                      inference_durations, prior_loss)
from .style import MelStyleEncoder
from .unet import ScoreNet

log = logging.getLogger(__name__)

# checkpoint namespace of each parameter group
NAMESPACES = {
    "style_encoder": "style_encoder",
    "text_encoder": "hier_encoder/text",
    "aligner": "hier_encoder/aligner",
    "duration_predictor": "hier_encoder/duration",
    "style_adaptive_encoder": "hier_encoder/sae",
    "diffusion": "diffusion",
}

LOSS_TERMS = ("diff", "prior", "forward_sum", "bin", "dur")


@dataclass
class Forward:
    """Intermediate results of one teacher-forced pass."""

    s: torch.Tensor
    H: torch.Tensor
    log_soft: torch.Tensor
    hard: torch.Tensor
    durations: torch.Tensor
    log_dur: torch.Tensor
    mu: torch.Tensor


class StyleDiffTTS(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), diff: DiffusionConfig = DiffusionConfig()):
        super().__init__()
        self.cfg = cfg
        self.diff = diff
        self.schedule = diff.schedule
        c = cfg
        self.style_encoder = MelStyleEncoder(c.n_mels, c.style_hidden, c.style_dim, c.n_heads, dropout=c.dropout)
        self.text_encoder = TextEncoder(c.vocab_size, c.d_model, c.n_heads, c.d_ff, c.n_text_blocks,
                                        dropout=c.dropout, max_len=c.max_tokens)
        self.aligner = Aligner(c.n_mels, c.d_model, c.align_width)
        self.duration_predictor = DurationPredictor(c.d_model, c.style_dim, c.dur_width, dropout=c.dropout,
                                                    detach_input=c.detach_duration_input)
        self.style_adaptive_encoder = StyleAdaptiveEncoder(c.d_model, c.style_dim, c.n_mels, c.n_heads, c.d_ff,
                                                           c.n_sae_blocks, dropout=c.dropout)
        self.diffusion = ScoreNet(c.unet_dim, c.style_dim, c.n_mels)

    # -- parameter groups -------------------------------------------------

    def group(self, name) -> nn.Module:
        if name not in NAMESPACES:
            raise ValueError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def namespaced_state(self):
        """``{"hier_encoder/sae/blocks.0.attn.in_proj_weight": tensor, ...}``."""
        out = {}
        for group, ns in NAMESPACES.items():
            for k, v in self.group(group).state_dict().items():
                out[f"{ns}/{k}"] = v
        return out

    def load_namespaced_state(self, state):
        for group, ns in NAMESPACES.items():
            prefix = ns + "/"
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            self.group(group).load_state_dict(sub)

    def set_trainable(self, frozen):
        for group in NAMESPACES:
            for p in self.group(group).parameters():
                p.requires_grad_(group not in frozen)

    # -- passes -----------------------------------------------------------

    def teacher_forced(self, batch, durations=None):
        s = self.style_encoder(batch.mels, batch.mel_mask)
        H = self.text_encoder(batch.tokens, batch.token_mask)
        _, log_soft = self.aligner(H, batch.mels, batch.token_mask, batch.mel_mask)
        if durations is None:
            hard, durations = viterbi_align(log_soft, batch.m_lens, batch.n_lens)
        else:
            hard = hard_from_durations(durations, batch.mels.shape[1])
        hard = hard.to(batch.mels.dtype)
        log_dur = self.duration_predictor(H, s, batch.token_mask)
        mu = self.style_adaptive_encoder(regulate_batch(H, hard), s, batch.mel_mask)
        return Forward(s, H, log_soft, hard, durations, log_dur, mu)

    def score(self, y, t, mu, s, mask=None):
        return self.diffusion(y, t, mu, s, mask)

    def loss_terms(self, batch, step=0, bin_ramp_steps=6000, generator=None, t=None, eps=None):
        """Per-example loss terms ``{name: (B,) tensor}`` plus the forward pass.

        ``t`` / ``eps`` override the Monte-Carlo draws of the diffusion loss.
        """
        fw = self.teacher_forced(batch)
        B = len(batch)
        dtype = batch.mels.dtype
        if t is None:
            u = torch.rand(B, generator=generator, dtype=dtype)
            t = self.diff.t_min + (self.schedule.T - self.diff.t_min) * u
        if eps is None:
            eps = torch.randn(batch.mels.shape, generator=generator, dtype=dtype)
        eps = eps * batch.mel_mask.unsqueeze(-1).to(dtype)
        mu_diff = fw.mu.detach() if self.diff.detach_mu else fw.mu
        ramp = 1.0 if bin_ramp_steps <= 0 else min(1.0, step / bin_ramp_steps)
        terms = {
            "diff": diffusion_loss(self.score, batch.mels, mu_diff, fw.s, t, eps, batch.mel_mask, self.schedule,
                                   self.diff.weighting, self.diff.t_min),
            "prior": prior_loss(fw.mu, batch.mels, batch.mel_mask),
            "forward_sum": forward_sum_loss(fw.log_soft, batch.m_lens, batch.n_lens),
            "bin": ramp * binarization_loss(fw.log_soft, fw.hard, batch.m_lens),
            "dur": duration_loss(fw.log_dur, fw.durations, batch.token_mask),
        }
        return terms, fw

    def total_loss(self, batch, step=0, weights=(1.0, 1.0, 1.0), bin_ramp_steps=6000, generator=None, t=None,
                   eps=None):
        """``L = w_diff L_diff + w_prior L_prior + w_align (L_fs + lambda_bin L_bin + L_dur)``.

        Returns ``(total, breakdown)`` where the breakdown holds the batch-mean,
        weight-applied contribution of each term (they sum to ``total``).
        Examples with fewer frames than tokens are dropped with a warning.
        """
        keep = [b for b in range(len(batch)) if int(batch.m_lens[b]) >= int(batch.n_lens[b])]
        if len(keep) < len(batch):
            log.warning("dropping %d infeasible examples from the batch", len(batch) - len(keep))
            if not keep:
                raise ValueError("no feasible example in batch")
            batch = batch.select(keep)
            if eps is not None:
                eps = eps[keep]
            if t is not None and torch.as_tensor(t).dim() > 0:
                t = torch.as_tensor(t)[keep]
        terms, _ = self.loss_terms(batch, step, bin_ramp_steps, generator, t, eps)
        w_diff, w_prior, w_align = weights
        scale = {"diff": w_diff, "prior": w_prior, "forward_sum": w_align, "bin": w_align, "dur": w_align}
        breakdown = {k: scale[k] * v.mean() for k, v in terms.items()}
        total = sum(breakdown.values())
        return total, breakdown

    # -- inference --------------------------------------------------------

    @torch.no_grad()
    def prior(self, tokens, ref_mel, pace=1.0, durations=None):
        """Style vector, prior mean and durations for one utterance.

        ``tokens`` is a 1-D id sequence; ``ref_mel`` an ``(m_ref, n_mels)``
        normalised mel. Returns ``(mu (1, m, n_mels), s (1, style_dim), durations (n,))``.
        """
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        tok = torch.as_tensor(tokens, dtype=torch.long)[None]
        tmask = torch.ones_like(tok, dtype=torch.bool)
        s = self.style_encoder(torch.as_tensor(ref_mel, dtype=dtype)[None])
        H = self.text_encoder(tok, tmask)
        if durations is None:
            durations = inference_durations(self.duration_predictor(H, s, tmask), tmask, pace)[0]
        durations = torch.as_tensor(durations, dtype=torch.long)
        hard = hard_from_durations(durations[None]).to(dtype)
        mmask = torch.ones(1, hard.shape[1], dtype=torch.bool)
        mu = self.style_adaptive_encoder(regulate_batch(H, hard), s, mmask)
        self.train(was_training)
        return mu, s, durations

    @torch.no_grad()
    def synthesize(self, tokens, ref_mel, n_steps=100, solver="ml", temperature=1.0, pace=1.0, seed=0,
                   durations=None, ml_variance=True):
        """Zero-shot synthesis of one utterance; returns ``(mel, mu, durations)`` with mels ``(m, n_mels)``."""
        mu, s, durations = self.prior(tokens, ref_mel, pace, durations)
        was_training = self.training
        self.eval()
        mel = reverse_sample(mu, s, self.score, self.schedule, n_steps, solver, temperature, seed,
                             t_min=self.diff.t_min, ml_variance=ml_variance)
        self.train(was_training)
        return mel[0], mu[0], durations

    @torch.no_grad()
    def synthesize_batch_teacher_forced(self, batch, ref_mels=None, ref_mask=None, n_steps=50, solver="ml", seed=0,
                                        ml_variance=True):
        """Sample mels for a batch using aligner (Viterbi) durations.

        Style comes from ``ref_mels`` when given, otherwise from the targets.
        """
        was_training = self.training
        self.eval()
        fw = self.teacher_forced(batch)
        s = fw.s if ref_mels is None else self.style_encoder(ref_mels, ref_mask)
        mu = fw.mu
        if ref_mels is not None:
            mu = self.style_adaptive_encoder(regulate_batch(fw.H, fw.hard), s, batch.mel_mask)
        mel = reverse_sample(mu, s, self.score, self.schedule, n_steps, solver, 1.0, seed, batch.mel_mask,
                             t_min=self.diff.t_min, ml_variance=ml_variance)
        self.train(was_training)
        return mel, mu
