"""Score network: a small 2-D U-Net over the (mel-bin x frame) grid.

Every layer output is re-masked (so every conv input is zero on padded
frames), and normalisation/attention statistics are taken over valid frames
only; padding a batch therefore never changes the output on valid frames.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn


class MaskedGroupNorm(nn.Module):
    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, mask):
        """``x`` must already be zero on padded frames."""
        B, C, Fq, T = x.shape
        G = self.groups
        m = mask.to(x.dtype)
        count = (m.sum(1) * (C // G) * Fq).view(B, 1)
        g = x.reshape(B, G, -1)
        mean = g.sum(-1) / count
        var = (g * g).sum(-1) / count - mean * mean
        rstd = torch.rsqrt(var.clamp(min=0.0) + self.eps)
        scale = rstd.repeat_interleave(C // G, dim=1) * self.weight  # (B, C)
        shift = self.bias - mean.repeat_interleave(C // G, dim=1) * scale
        return (x * scale[:, :, None, None] + shift[:, :, None, None]) * m[:, None, None, :]


class Block(nn.Module):
    def __init__(self, dim_in, dim_out, groups=4):
        super().__init__()
        self.conv = nn.Conv2d(dim_in, dim_out, 3, padding=1)
        self.norm = MaskedGroupNorm(groups, dim_out)

    def forward(self, x, mask):
        m = mask[:, None, None, :].to(x.dtype)
        h = self.norm(self.conv(x) * m, mask)
        return F.silu(h) * m


class ResnetBlock(nn.Module):
    """Two conv blocks; the (time + style) conditioning vector is projected to
    channels and broadcast-added between them."""

    def __init__(self, dim_in, dim_out, cond_dim, groups=4):
        super().__init__()
        self.cond = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, dim_out))
        self.block1 = Block(dim_in, dim_out, groups)
        self.block2 = Block(dim_out, dim_out, groups)
        self.res = nn.Conv2d(dim_in, dim_out, 1) if dim_in != dim_out else nn.Identity()

    def forward(self, x, mask, cond):
        m = mask[:, None, None, :].to(x.dtype)
        h = self.block1(x, mask)
        h = (h + self.cond(cond)[:, :, None, None]) * m
        h = self.block2(h, mask)
        return h + self.res(x) * m


class LinearAttention(nn.Module):
    """Softmax-over-keys linear attention; padded frames are excluded from the key softmax."""

    def __init__(self, dim, heads=4, dim_head=16):
        super().__init__()
        self.heads = heads
        hidden = heads * dim_head
        self.to_qkv = nn.Conv2d(dim, 3 * hidden, 1, bias=False)
        self.to_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x, mask):
        B, C, Fq, T = x.shape
        m = mask[:, None, None, :].to(x.dtype)
        qkv = self.to_qkv(x).view(B, 3, self.heads, -1, Fq * T)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        flat = mask[:, None, None, :].expand(B, 1, Fq, T).reshape(B, 1, 1, Fq * T)
        k = k.masked_fill(~flat, float("-inf")).softmax(dim=-1)
        v = v * flat.to(x.dtype)
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q).reshape(B, -1, Fq, T)
        return self.to_out(out) * m


class Residual(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x, mask):
        return x + self.fn(x, mask)


def time_embedding(t, dim, scale=1000.0):
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=t.dtype) * -(math.log(10000.0) / (half - 1)))
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ScoreNet(nn.Module):
    """``score(Y_t, t, mu, s)`` with ``Y_t``/``mu`` shaped ``(B, m, n_mels)``.

    Two resolution levels (one 2x down/up-sampling on both grid axes) and a
    linear-attention bottleneck. ``n_mels`` must be even.
    """

    def __init__(self, dim=16, style_dim=128, n_mels=80, groups=4, attn_heads=4, attn_dim_head=16):
        super().__init__()
        if n_mels % 2:
            raise ValueError("n_mels must be even")
        self.dim = dim
        cond_dim = 4 * dim
        self.time_mlp = nn.Sequential(nn.Linear(dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.style_mlp = nn.Sequential(nn.Linear(style_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        d1, d2 = dim, 2 * dim
        self.down1 = nn.ModuleList([ResnetBlock(2, d1, cond_dim, groups), ResnetBlock(d1, d1, cond_dim, groups)])
        self.downsample = nn.Conv2d(d1, d1, 3, stride=2, padding=1)
        self.down2 = nn.ModuleList([ResnetBlock(d1, d2, cond_dim, groups), ResnetBlock(d2, d2, cond_dim, groups)])
        self.mid1 = ResnetBlock(d2, d2, cond_dim, groups)
        self.mid_attn = Residual(LinearAttention(d2, attn_heads, attn_dim_head))
        self.mid2 = ResnetBlock(d2, d2, cond_dim, groups)
        self.up2 = nn.ModuleList([ResnetBlock(2 * d2, d2, cond_dim, groups), ResnetBlock(d2, d2, cond_dim, groups)])
        self.upsample = nn.ConvTranspose2d(d2, d2, 4, stride=2, padding=1)
        self.up1 = nn.ModuleList([ResnetBlock(d2 + d1, d1, cond_dim, groups), ResnetBlock(d1, d1, cond_dim, groups)])
        self.final = Block(d1, d1, groups)
        self.out = nn.Conv2d(d1, 1, 1)

    def forward(self, y, t, mu, s, mask=None):
        B, m, n_mels = y.shape
        if mu.shape != y.shape:
            raise ValueError(f"mu shape {tuple(mu.shape)} != y shape {tuple(y.shape)}")
        if mask is None:
            mask = torch.ones(B, m, dtype=torch.bool)
        t = torch.as_tensor(t, dtype=y.dtype)
        if t.dim() == 0:
            t = t.expand(B)
        pad = m % 2
        if pad:
            y, mu = F.pad(y, (0, 0, 0, pad)), F.pad(mu, (0, 0, 0, pad))
            mask = F.pad(mask, (0, pad), value=False)
        cond = self.time_mlp(time_embedding(t, self.dim)) + self.style_mlp(s)

        mf = mask.to(y.dtype)[:, None, :, None]
        x = torch.stack([y, mu], dim=1).mul(mf).transpose(2, 3)  # (B, 2, n_mels, T)
        mask2 = mask[:, ::2]
        for blk in self.down1:
            x = blk(x, mask, cond)
        skip1 = x
        x = self.downsample(x) * mask2[:, None, None, :].to(x.dtype)
        for blk in self.down2:
            x = blk(x, mask2, cond)
        skip2 = x
        x = self.mid1(x, mask2, cond)
        x = self.mid_attn(x, mask2)
        x = self.mid2(x, mask2, cond)
        x = torch.cat([x, skip2], dim=1)
        for blk in self.up2:
            x = blk(x, mask2, cond)
        x = self.upsample(x) * mask[:, None, None, :].to(x.dtype)
        x = torch.cat([x, skip1], dim=1)
        for blk in self.up1:
            x = blk(x, mask, cond)
        x = self.final(x, mask)
        out = (self.out(x) * mask[:, None, None, :].to(x.dtype))[:, 0].transpose(1, 2)
        return out[:, :m]
