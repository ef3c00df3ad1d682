"""Rank-generic (2D/3D) building blocks shared by the networks."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..foundation import ContextDimMismatch, RankError


def conv_nd(rank: int, *args, **kwargs) -> nn.Module:
    if rank == 2:
        return nn.Conv2d(*args, **kwargs)
    if rank == 3:
        return nn.Conv3d(*args, **kwargs)
    raise RankError(f"spatial rank must be 2 or 3, got {rank}")


def avg_pool_nd(rank: int, x: torch.Tensor, k: int = 2) -> torch.Tensor:
    return F.avg_pool2d(x, k) if rank == 2 else F.avg_pool3d(x, k)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels, eps=1e-6)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""

    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.base_dim).to(dtype))


class ResBlock(nn.Module):
    def __init__(self, rank: int, in_ch: int, out_ch: int, groups: int, emb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = norm(in_ch, groups)
        self.conv1 = conv_nd(rank, in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = norm(out_ch, groups)
        self.conv2 = conv_nd(rank, out_ch, out_ch, 3, padding=1)
        self.skip = conv_nd(rank, in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.rank = rank

    def forward(self, x: torch.Tensor, emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(F.silu(emb)).view(*emb.shape[:1], -1, *([1] * self.rank))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, rank: int, ch: int):
        super().__init__()
        self.conv = conv_nd(rank, ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, rank: int, ch: int):
        super().__init__()
        self.conv = conv_nd(rank, ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, causal: bool = False) -> torch.Tensor:
    """Plain softmax attention on ``(B, L, D)`` tensors."""
    b, lq, d = q.shape
    lk = k.shape[1]
    hd = d // heads
    q = q.view(b, lq, heads, hd).transpose(1, 2)
    k = k.view(b, lk, heads, hd).transpose(1, 2)
    v = v.view(b, lk, heads, hd).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    if causal:
        mask = torch.ones(lq, lk, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    out = scores.softmax(dim=-1) @ v
    return out.transpose(1, 2).reshape(b, lq, d)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None):
        super().__init__()
        self.heads = heads
        kv_dim = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        ctx = x if context is None else context
        return self.to_out(attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: Optional[int]):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim) if context_dim else None
        self.attn2 = CrossAttention(dim, heads, context_dim) if context_dim else None
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, context=None):
        x = x + self.attn1(self.norm1(x))
        if self.attn2 is not None and context is not None:
            x = x + self.attn2(self.norm2(x), context)
        return x + self.ff(self.norm3(x))


class SpatialTransformer(nn.Module):
    """Self-attention over spatial positions with optional cross-attention."""

    def __init__(self, rank: int, ch: int, head_channels: int, groups: int, context_dim: Optional[int] = None):
        super().__init__()
        self.heads = max(1, ch // head_channels) if head_channels > 0 else 1
        if ch % self.heads:
            raise ValueError(f"{ch} channels not divisible into {self.heads} heads")
        self.context_dim = context_dim
        self.norm = norm(ch, groups)
        self.proj_in = conv_nd(rank, ch, ch, 1)
        self.block = TransformerBlock(ch, self.heads, context_dim)
        self.proj_out = conv_nd(rank, ch, ch, 1)

    def forward(self, x, context=None):
        if context is not None and (self.context_dim is None or context.shape[-1] != self.context_dim):
            raise ContextDimMismatch(f"context dim {context.shape[-1]} != {self.context_dim}")
        b, c, *spatial = x.shape
        h = self.proj_in(self.norm(x))
        h = h.reshape(b, c, -1).transpose(1, 2)
        h = self.block(h, context)
        h = h.transpose(1, 2).reshape(b, c, *spatial)
        return x + self.proj_out(h)
