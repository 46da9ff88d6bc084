"""Transformer building blocks shared by the encoders."""

import math

import torch
import torch.nn.functional as F
from torch import nn


def sinusoid_table(length, dim, dtype=torch.float32):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.to(dtype)


def masked_mean(x, mask, dim):
    """Mean of ``x`` over ``dim`` counting only positions where ``mask`` is true."""
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m.unsqueeze(-1)
    return (x * m).sum(dim) / m.sum(dim).clamp(min=1.0)


class LayerNorm(nn.LayerNorm):
    """LayerNorm that ignores a style argument, so blocks can swap in SALN."""

    def forward(self, x, s=None):
        return super().forward(x)


def saln(h, s, affine: nn.Linear, eps=1e-5):
    """Style-adaptive layer norm: ``g(s) * (h - mean) / std + b(s)``.

    ``affine`` maps the style vector to ``2 * width`` values split into gain
    and bias. ``h`` is ``(..., width)``; ``s`` broadcasts over the middle axes.
    """
    mean = h.mean(-1, keepdim=True)
    var = h.var(-1, unbiased=False, keepdim=True)
    normed = (h - mean) / torch.sqrt(var + eps)
    gb = affine(s)
    while gb.dim() < h.dim():
        gb = gb.unsqueeze(-2)
    gain, bias = gb.chunk(2, dim=-1)
    return gain * normed + bias


class StyleAdaptiveLayerNorm(nn.Module):
    def __init__(self, width, style_dim, eps=1e-5):
        super().__init__()
        self.width = width
        self.eps = eps
        self.affine = nn.Linear(style_dim, 2 * width)
        with torch.no_grad():
            self.affine.bias[:width] = 1.0
            self.affine.bias[width:] = 0.0

    def forward(self, x, s):
        return saln(x, s, self.affine, self.eps)


class ConvFeedForward(nn.Module):
    def __init__(self, d_model, d_ff, kernel_size=3, dropout=0.1):
        super().__init__()
        self.w1 = nn.Conv1d(d_model, d_ff, kernel_size, padding=kernel_size // 2)
        self.w2 = nn.Conv1d(d_ff, d_model, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        m = mask.unsqueeze(1).to(x.dtype)
        h = self.w1(x.transpose(1, 2) * m)
        h = self.dropout(F.relu(h)) * m
        return self.w2(h).transpose(1, 2)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + conv feed-forward block.

    With ``style_dim`` set, both norms are SALN and ``forward`` needs ``s``.
    """

    def __init__(self, d_model, n_heads, d_ff, kernel_size=3, dropout=0.1, style_dim=None):
        super().__init__()
        if style_dim is None:
            self.norm1, self.norm2 = LayerNorm(d_model), LayerNorm(d_model)
        else:
            self.norm1 = StyleAdaptiveLayerNorm(d_model, style_dim)
            self.norm2 = StyleAdaptiveLayerNorm(d_model, style_dim)
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.ff = ConvFeedForward(d_model, d_ff, kernel_size, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask, s=None):
        m = mask.unsqueeze(-1).to(x.dtype)
        h = self.norm1(x, s)
        a, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
        x = (x + self.dropout(a)) * m
        x = (x + self.dropout(self.ff(self.norm2(x, s), mask))) * m
        return x
