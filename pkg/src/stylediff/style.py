"""Mel-style encoder: reference speech of any length -> fixed-size style vector."""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import masked_mean

MIN_FRAMES = 4


class GatedConv(nn.Module):
    """Residual 1-D convolution with a GLU gate."""

    def __init__(self, dim, kernel_size=5, dropout=0.1):
        super().__init__()
        self.conv = nn.Conv1d(dim, 2 * dim, kernel_size, padding=kernel_size // 2)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        m = mask.unsqueeze(1).to(x.dtype)
        h = x.transpose(1, 2) * m
        h = F.glu(self.conv(h), dim=1)
        return (x + self.dropout(h.transpose(1, 2))) * m.transpose(1, 2)


class MelStyleEncoder(nn.Module):
    def __init__(self, n_mels=80, hidden=128, style_dim=128, n_heads=2, kernel_size=5, dropout=0.1):
        super().__init__()
        if hidden % n_heads:
            raise ValueError("hidden width must be divisible by n_heads")
        self.spectral = nn.Sequential(
            nn.Linear(n_mels, hidden), nn.Mish(), nn.Dropout(dropout),
            nn.Linear(hidden, hidden), nn.Mish(), nn.Dropout(dropout),
        )
        self.temporal = nn.ModuleList([GatedConv(hidden, kernel_size, dropout) for _ in range(2)])
        self.attn = nn.MultiheadAttention(hidden, n_heads, dropout=dropout, batch_first=True)
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(hidden, style_dim)
        self.use_attention = True

    def pooled(self, mel, mask=None):
        """Hidden state after temporal average pooling, before the projection."""
        if mask is None:
            mask = torch.ones(mel.shape[:2], dtype=torch.bool, device=mel.device)
        if torch.any(mask.sum(1) < MIN_FRAMES):
            raise ValueError(f"style encoder needs at least {MIN_FRAMES} frames")
        m = mask.unsqueeze(-1).to(mel.dtype)
        x = self.spectral(mel) * m
        for conv in self.temporal:
            x = conv(x, mask)
        if self.use_attention:
            a, _ = self.attn(x, x, x, key_padding_mask=~mask, need_weights=False)
            x = (x + self.dropout(a)) * m
        return masked_mean(x, mask, dim=1)

    def forward(self, mel, mask=None):
        """``mel`` is ``(B, m, n_mels)``; returns ``(B, style_dim)``."""
        return self.proj(self.pooled(mel, mask))


@torch.no_grad()
def encode_style(mel, encoder: MelStyleEncoder) -> np.ndarray:
    """Style vector of a single ``(m, n_mels)`` mel in inference mode."""
    frames = np.asarray(getattr(mel, "frames", mel))
    if frames.ndim != 2 or frames.shape[0] < MIN_FRAMES:
        raise ValueError(f"need a (m >= {MIN_FRAMES}, n_mels) mel")
    if not np.all(np.isfinite(frames)):
        raise ValueError("mel contains non-finite values")
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    s = encoder(torch.as_tensor(frames, dtype=dtype)[None])[0]
    encoder.train(was_training)
    return s.numpy().astype(np.float64)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
