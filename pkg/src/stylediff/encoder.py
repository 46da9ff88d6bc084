"""Hierarchical encoder: text encoder, aligner, duration predictor and the
style-adaptive encoder that produces the prior mean."""

import torch
import torch.nn.functional as F
from torch import nn

from .layers import LayerNorm, StyleAdaptiveLayerNorm, TransformerBlock, sinusoid_table


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, d_model=128, n_heads=2, d_ff=512, n_blocks=4, kernel_size=3, dropout=0.1,
                 max_len=512):
        super().__init__()
        self.d_model = d_model
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, d_model, padding_idx=0)
        nn.init.normal_(self.embed.weight, 0.0, d_model**-0.5)
        self.register_buffer("pos", sinusoid_table(max_len, d_model), persistent=False)
        self.dropout = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            [TransformerBlock(d_model, n_heads, d_ff, kernel_size, dropout) for _ in range(n_blocks)]
        )
        self.norm = LayerNorm(d_model)

    def forward(self, tokens, mask):
        n = tokens.shape[1]
        if n > self.max_len:
            raise ValueError(f"input of {n} tokens exceeds max_len={self.max_len}")
        m = mask.unsqueeze(-1)
        x = self.embed(tokens) * self.d_model**0.5 + self.pos[:n].to(self.embed.weight.dtype)
        x = self.dropout(x) * m
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x) * m


class _ConvStack(nn.Module):
    def __init__(self, d_in, width, d_out):
        super().__init__()
        self.c1 = nn.Conv1d(d_in, width, 3, padding=1)
        self.c2 = nn.Conv1d(width, d_out, 1)

    def forward(self, x, mask):
        m = mask.unsqueeze(1).to(x.dtype)
        h = F.relu(self.c1(x.transpose(1, 2) * m)) * m
        return (self.c2(h) * m).transpose(1, 2)


class Aligner(nn.Module):
    """Energies ``-||q_j - k_i||^2`` between conv-encoded mel frames and text rows."""

    def __init__(self, n_mels=80, d_text=128, width=128):
        super().__init__()
        self.query = _ConvStack(n_mels, width, width)
        self.key = _ConvStack(d_text, width, width)

    def energies(self, H, mel, token_mask, mel_mask):
        q = self.query(mel, mel_mask)
        k = self.key(H, token_mask)
        return -_sqdist(q, k)

    def forward(self, H, mel, token_mask, mel_mask):
        """Returns ``(energies, log_soft)``; ``log_soft`` rows are log-softmaxed over valid tokens."""
        if torch.any(mel_mask.sum(1) < token_mask.sum(1)):
            raise ValueError("infeasible alignment: fewer frames than tokens")
        e = self.energies(H, mel, token_mask, mel_mask)
        e = e.masked_fill(~token_mask[:, None, :], float("-inf"))
        log_soft = torch.log_softmax(e, dim=-1)
        log_soft = log_soft.masked_fill(~mel_mask[:, :, None], 0.0)
        return e, log_soft


def _sqdist(q, k):
    return (q[:, :, None, :] - k[:, None, :, :]).pow(2).sum(-1)


class DurationPredictor(nn.Module):
    """Predicts per-token log-duration from text hidden states plus style.

    ``detach_input`` stops the duration loss from reaching the text encoder.
    """

    def __init__(self, d_model=128, style_dim=128, width=128, kernel_size=3, dropout=0.1, detach_input=False):
        super().__init__()
        self.detach_input = detach_input
        self.style_proj = nn.Linear(style_dim, d_model)
        self.conv1 = nn.Conv1d(d_model, width, kernel_size, padding=kernel_size // 2)
        self.norm1 = nn.LayerNorm(width)
        self.conv2 = nn.Conv1d(width, width, kernel_size, padding=kernel_size // 2)
        self.norm2 = nn.LayerNorm(width)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(width, 1)

    def forward(self, H, s, mask):
        m = mask.unsqueeze(1).to(H.dtype)
        x = ((H.detach() if self.detach_input else H) + self.style_proj(s)[:, None, :]).transpose(1, 2) * m
        x = self.dropout(self.norm1(F.relu(self.conv1(x)).transpose(1, 2))).transpose(1, 2) * m
        x = self.dropout(self.norm2(F.relu(self.conv2(x)).transpose(1, 2))) * m.transpose(1, 2)
        return self.out(x).squeeze(-1) * mask.to(H.dtype)


def duration_loss(log_dur_pred, durations, mask):
    """Masked per-example MSE between predicted and target log-durations."""
    m = mask.to(log_dur_pred.dtype)
    target = torch.log(durations.to(log_dur_pred.dtype).clamp(min=1.0))
    return ((log_dur_pred - target) ** 2 * m).sum(1) / m.sum(1)


def inference_durations(log_dur_pred, mask, pace=1.0):
    """``round(exp(c) * pace)`` clamped to >= 1 on valid tokens, 0 on padding."""
    d = torch.round(torch.exp(log_dur_pred) * pace).long().clamp(min=1)
    return d * mask.long()


class StyleAdaptiveEncoder(nn.Module):
    def __init__(self, d_model=128, style_dim=128, n_mels=80, n_heads=2, d_ff=512, n_blocks=4, kernel_size=3,
                 dropout=0.1, max_len=4096):
        super().__init__()
        self.register_buffer("pos", sinusoid_table(max_len, d_model), persistent=False)
        self.blocks = nn.ModuleList(
            [TransformerBlock(d_model, n_heads, d_ff, kernel_size, dropout, style_dim=style_dim)
             for _ in range(n_blocks)]
        )
        self.norm = StyleAdaptiveLayerNorm(d_model, style_dim)
        self.proj = nn.Linear(d_model, n_mels)

    def forward(self, H_reg, s, mask):
        m = mask.unsqueeze(-1).to(H_reg.dtype)
        x = (H_reg + self.pos[: H_reg.shape[1]].to(H_reg.dtype)) * m
        for block in self.blocks:
            x = block(x, mask, s)
        return self.proj(self.norm(x, s)) * m


def prior_loss(mu, Y, mask=None):
    """Per-example mean of ``(mu - Y)^2`` over valid frames and bins."""
    if mu.shape != Y.shape:
        raise ValueError(f"shape mismatch {tuple(mu.shape)} vs {tuple(Y.shape)}")
    squeeze = mu.dim() == 2
    if squeeze:
        mu, Y = mu.unsqueeze(0), Y.unsqueeze(0)
    if mask is None:
        mask = torch.ones(mu.shape[:2], dtype=torch.bool)
    elif squeeze:
        mask = mask.unsqueeze(0)
    m = mask.unsqueeze(-1).to(mu.dtype)
    loss = ((mu - Y) ** 2 * m).sum((1, 2)) / (m.sum((1, 2)) * mu.shape[-1])
    return loss[0] if squeeze else loss
