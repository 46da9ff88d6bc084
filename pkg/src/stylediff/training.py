"""Optimisation loop, resumable checkpointing and selective fine-tuning."""

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .audio import MelStats, compute_stats, normalize_mel
from .checkpoint import Checkpoint, from_model, load_checkpoint, restore_optimizer, save_checkpoint
from .config import PARAM_GROUPS, RunConfig, resolve_groups
from .data import collate
from .model import LOSS_TERMS, StyleDiffTTS
from .text import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"
METRICS_NAME = "metrics.jsonl"


class DivergenceError(RuntimeError):
    """Non-finite loss; ``last_good`` is the most recent checkpoint written (or the start state)."""

    def __init__(self, step, last_good):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint is step {last_good.step}")
        self.step = step
        self.last_good = last_good


def step_seed(seed, step):
    """A 63-bit seed derived from ``(seed, step)``."""
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def normalize_corpus(utts, stats: MelStats):
    return [dataclasses.replace(u, mel=normalize_mel(u.mel, stats)) for u in utts]


def learning_rate(cfg, step):
    """Linear warm-up to ``cfg.lr`` over ``cfg.warmup_steps``, then constant."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


class Trainer:
    """Holds the model, optimiser and (normalised) data for one run.

    ``data`` is the main corpus; ``target`` (fine-tuning) is mixed into each
    batch at ``config.train.finetune_mix``. Frozen groups get
    ``requires_grad=False`` and stay out of the optimiser.
    """

    def __init__(self, config: RunConfig, model: StyleDiffTTS, data, vocab: Vocabulary, stats: MelStats, step=0,
                 target=None, metrics_path=None, dtype=torch.float32):
        if not data and not target:
            raise ValueError("empty corpus")
        self.config = config
        self.tc = config.train
        self.model = model.to(dtype)
        self.dtype = dtype
        self.data = list(data)
        self.target = list(target or [])
        self.vocab = vocab
        self.stats = stats
        self.step = step
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.history = []
        model.set_trainable(set(self.tc.freeze))
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=self.tc.lr) if self.params else None

    # -- batching ------------------------------------------------------------

    def _draw(self, rng, pool, k):
        if k <= 0 or not pool:
            return []
        idx = rng.choice(len(pool), size=k, replace=k > len(pool))
        return [pool[i] for i in idx]

    def batch_for(self, step):
        rng = np.random.default_rng([self.tc.seed, step])
        bs = self.tc.batch_size
        if self.target:
            n_target = bs if not self.data else max(1, round(bs * self.tc.finetune_mix))
            utts = self._draw(rng, self.target, n_target) + self._draw(rng, self.data, bs - n_target)
        else:
            utts = self._draw(rng, self.data, min(bs, len(self.data)))
        return collate(utts, self.dtype)

    # -- stepping ------------------------------------------------------------

    def train_step(self):
        """One optimisation step; returns the metrics record (loss terms are weighted batch means)."""
        step = self.step
        self.model.train()
        torch.manual_seed(step_seed(self.tc.seed, step))
        gen = torch.Generator().manual_seed(step_seed(self.tc.seed + 1, step))
        batch = self.batch_for(step)
        weights = (self.tc.w_diff, self.tc.w_prior, self.tc.w_align)
        lr = learning_rate(self.tc, step)
        with torch.set_grad_enabled(self.optimizer is not None):
            total, parts = self.model.total_loss(batch, step, weights, self.tc.bin_ramp_steps, gen)
        record = {"step": step + 1, "lr": lr, "total": float(total.detach())}
        record.update({k: float(parts[k].detach()) for k in LOSS_TERMS})
        if not math.isfinite(record["total"]):
            return record
        if self.optimizer is not None:
            for g in self.optimizer.param_groups:
                g["lr"] = lr
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            if self.tc.grad_clip > 0:
                record["grad_norm"] = float(torch.nn.utils.clip_grad_norm_(self.params, self.tc.grad_clip))
            self.optimizer.step()
        self.step = step + 1
        return record

    def checkpoint(self) -> Checkpoint:
        return from_model(self.model, self.config, self.step, self.stats, self.vocab, self.optimizer)

    def _log(self, record):
        self.history.append(record)
        if self.metrics_path and (record["step"] % max(1, self.tc.log_every) == 0):
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def run(self, n_steps, out_dir=None):
        """Run ``n_steps`` steps, writing ``out_dir/checkpoint.npz`` every
        ``checkpoint_every`` steps and at the end. Raises :class:`DivergenceError`."""
        last_good = self.checkpoint()
        path = Path(out_dir) / CHECKPOINT_NAME if out_dir else None
        for _ in range(n_steps):
            record = self.train_step()
            if not math.isfinite(record["total"]):
                log.error("non-finite loss at step %d; aborting", record["step"])
                raise DivergenceError(record["step"], last_good)
            self._log(record)
            if self.tc.checkpoint_every > 0 and self.step % self.tc.checkpoint_every == 0:
                last_good = self.checkpoint()
                if path:
                    save_checkpoint(last_good, path)
        final = self.checkpoint()
        if path:
            save_checkpoint(final, path)
        return final


def _check_vocab(config, vocab):
    if len(vocab) > config.model.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} ids exceeds model.vocab_size={config.model.vocab_size}")


def build_trainer(config: RunConfig, corpus, vocab: Vocabulary, out_dir=None, resume=True, dtype=torch.float32):
    """Fresh (or resumed from ``out_dir/checkpoint.npz``) trainer over a raw corpus."""
    if not corpus:
        raise ValueError("empty corpus")
    _check_vocab(config, vocab)
    out = Path(out_dir) if out_dir else None
    metrics = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / METRICS_NAME
    if out and resume and (out / CHECKPOINT_NAME).exists():
        ckpt = load_checkpoint(out / CHECKPOINT_NAME, config)
        log.info("resuming from step %d", ckpt.step)
        trainer = Trainer(config, ckpt.build_model(dtype), normalize_corpus(corpus, ckpt.stats), ckpt.vocab,
                          ckpt.stats, ckpt.step, metrics_path=metrics, dtype=dtype)
        if trainer.optimizer is not None:
            restore_optimizer(trainer.optimizer, trainer.model, ckpt.optim)
        return trainer
    if metrics and metrics.exists():
        metrics.unlink()
    stats = compute_stats([u.mel for u in corpus])
    torch.manual_seed(config.train.seed)
    model = StyleDiffTTS(config.model, config.diffusion)
    return Trainer(config, model, normalize_corpus(corpus, stats), vocab, stats, metrics_path=metrics, dtype=dtype)


def train(config: RunConfig, corpus, vocab: Vocabulary, out_dir=None, resume=True, dtype=torch.float32):
    """Train until ``config.train.steps`` total steps; returns the final :class:`Checkpoint`."""
    trainer = build_trainer(config, corpus, vocab, out_dir, resume, dtype)
    return trainer.run(max(0, config.train.steps - trainer.step), out_dir)


def finetune(ckpt: Checkpoint, target, groups, steps, regularization=None, out_dir=None, train_config=None,
             dtype=torch.float32):
    """Update only ``groups`` for ``steps`` steps on ``target`` utterances.

    Each batch mixes target utterances with ``regularization`` ones (the
    original training corpus) at ``finetune_mix``. The step counter, and so
    the learning-rate schedule, continues from the checkpoint; the optimiser
    starts fresh. ``groups`` empty returns ``ckpt`` unchanged.
    """
    groups = resolve_groups(groups)
    if not groups or steps <= 0:
        return ckpt
    if not target:
        raise ValueError("empty target corpus")
    tc = train_config or ckpt.config.train
    tc = dataclasses.replace(tc, freeze=[g for g in PARAM_GROUPS if g not in groups])
    config = dataclasses.replace(ckpt.config, train=tc)
    _check_vocab(config, ckpt.vocab)
    metrics = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics = Path(out_dir) / METRICS_NAME
    trainer = Trainer(config, ckpt.build_model(dtype), normalize_corpus(regularization or [], ckpt.stats),
                      ckpt.vocab, ckpt.stats, ckpt.step, target=normalize_corpus(target, ckpt.stats),
                      metrics_path=metrics, dtype=dtype)
    return trainer.run(steps, out_dir)


def moving_average(history, key, end, window=50):
    """Mean of ``key`` over the ``window`` records ending at step ``end``."""
    vals = [r[key] for r in history if end - window < r["step"] <= end]
    if not vals:
        raise ValueError(f"no records in the window ending at step {end}")
    return float(np.mean(vals))
