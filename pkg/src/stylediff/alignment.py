"""Monotonic text-to-frame alignment: forward-sum loss, Viterbi, length regulation."""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import kernels

log = logging.getLogger(__name__)


@dataclass
class AlignmentResult:
    soft: torch.Tensor  # (B, M, N) frame -> token posterior
    hard: torch.Tensor  # (B, M, N) one-hot monotonic path
    durations: torch.Tensor  # (B, N) long, zero on padded tokens


def _lengths(log_soft, m_lens, n_lens):
    B, M, N = log_soft.shape
    m = torch.full((B,), M, dtype=torch.long) if m_lens is None else torch.as_tensor(m_lens, dtype=torch.long)
    n = torch.full((B,), N, dtype=torch.long) if n_lens is None else torch.as_tensor(n_lens, dtype=torch.long)
    if torch.any(m < n):
        raise ValueError("infeasible alignment: fewer frames than tokens")
    return m, n


class _ForwardSum(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_soft, m_lens, n_lens):
        arr = log_soft.detach().cpu().numpy()
        log_z, post = kernels.forward_backward(arr, m_lens.numpy(), n_lens.numpy())
        ctx.save_for_backward(torch.from_numpy(post).to(log_soft.dtype))
        return torch.from_numpy(-log_z).to(log_soft.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (post,) = ctx.saved_tensors
        return -post * grad_out[:, None, None], None, None


def forward_sum_loss(log_soft, m_lens=None, n_lens=None):
    """Per-example ``-log`` of the total probability of all monotonic paths.

    ``log_soft`` is ``(B, M, N)`` (or ``(M, N)``) with valid rows normalised
    over valid tokens. Returns a ``(B,)`` tensor (a scalar for 2-D input).
    """
    squeeze = log_soft.dim() == 2
    if squeeze:
        log_soft = log_soft.unsqueeze(0)
    m, n = _lengths(log_soft, m_lens, n_lens)
    loss = _ForwardSum.apply(log_soft, m, n)
    return loss[0] if squeeze else loss


def durations_from_path(path, m_lens, n_max):
    B = path.shape[0]
    dur = np.zeros((B, n_max), dtype=np.int64)
    for b in range(B):
        dur[b] = np.bincount(path[b, : int(m_lens[b])], minlength=n_max)[:n_max]
    return dur


def viterbi_align(log_soft, m_lens=None, n_lens=None):
    """Most probable monotonic path as ``(hard, durations)`` tensors.

    Ties stay on the current token (reading the path forward in time). ``hard`` is ``(B, M, N)`` one-hot over valid
    frames (zero rows on padding).
    """
    squeeze = log_soft.dim() == 2
    if squeeze:
        log_soft = log_soft.unsqueeze(0)
    m, n = _lengths(log_soft, m_lens, n_lens)
    B, M, N = log_soft.shape
    path, _ = kernels.viterbi(log_soft.detach().cpu().numpy(), m.numpy(), n.numpy())
    hard = np.zeros((B, M, N))
    for b in range(B):
        mb = int(m[b])
        hard[b, np.arange(mb), path[b, :mb]] = 1.0
    dur = durations_from_path(path, m.numpy(), N)
    hard = torch.from_numpy(hard).to(log_soft.dtype)
    dur = torch.from_numpy(dur)
    if squeeze:
        return hard[0], dur[0]
    return hard, dur


def binarization_loss(log_soft, hard, m_lens=None):
    """``-(1/m) sum_j log soft(j, path_j)`` per example.

    Takes log posteriors for numerical safety; returns ``(B,)``.
    """
    if log_soft.shape != hard.shape:
        raise ValueError(f"shape mismatch {tuple(log_soft.shape)} vs {tuple(hard.shape)}")
    squeeze = log_soft.dim() == 2
    if squeeze:
        log_soft, hard = log_soft.unsqueeze(0), hard.unsqueeze(0)
    B, M, _ = log_soft.shape
    m = torch.full((B,), M) if m_lens is None else torch.as_tensor(m_lens)
    picked = torch.where(hard > 0, log_soft, torch.zeros_like(log_soft)).sum(dim=(1, 2))
    loss = -picked / m.to(log_soft.dtype)
    return loss[0] if squeeze else loss


def hard_from_durations(durations, m_max=None):
    """One-hot ``(B, M, N)`` expansion matrix from integer durations ``(B, N)``."""
    durations = torch.as_tensor(durations, dtype=torch.long)
    squeeze = durations.dim() == 1
    if squeeze:
        durations = durations.unsqueeze(0)
    B, N = durations.shape
    totals = durations.sum(1)
    M = int(totals.max()) if m_max is None else m_max
    ends = torch.cumsum(durations, 1)
    starts = ends - durations
    frames = torch.arange(M)[None, :, None]
    hard = (frames >= starts[:, None, :]) & (frames < ends[:, None, :])
    hard = hard.to(torch.get_default_dtype())
    return hard[0] if squeeze else hard


def clamp_durations(durations):
    durations = torch.as_tensor(durations)
    rounded = torch.round(durations).long() if durations.is_floating_point() else durations.long()
    if torch.any(rounded < 1):
        log.info("clamping %d durations below 1", int((rounded < 1).sum()))
    return rounded.clamp(min=1)


def length_regulate(H, durations):
    """Repeat row ``i`` of ``H`` ``durations[i]`` times (``H`` is ``(n, d)``)."""
    return torch.repeat_interleave(H, clamp_durations(durations), dim=0)


def regulate_batch(H, hard):
    """Batched length regulation through the expansion matrix: ``hard @ H``."""
    return torch.bmm(hard.to(H.dtype), H)
