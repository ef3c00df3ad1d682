"""Diffusion UNet, UNet-encoder head and the ControlNet adapter."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..foundation import ContextDimMismatch, RangeError, ShapeMismatch
from .blocks import (
    Downsample,
    ResBlock,
    SpatialTransformer,
    TimestepEmbedding,
    Upsample,
    conv_nd,
    norm,
    zero_module,
)


@dataclass
class UNetConfig:
    spatial_rank: int = 2
    in_channels: int = 1
    out_channels: int = 1
    channels: Sequence[int] = (32, 64, 64)
    attention_levels: Sequence[bool] = (False, True, True)
    head_channels: Sequence[int] = (0, 32, 32)
    num_res_blocks: int = 1
    norm_groups: int = 8
    cross_attention_dim: Optional[int] = None
    num_class_embeds: Optional[int] = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.attention_levels = tuple(bool(a) for a in self.attention_levels)
        self.head_channels = tuple(int(h) for h in self.head_channels)
        if not (len(self.channels) == len(self.attention_levels) == len(self.head_channels)):
            raise RangeError("channels, attention_levels and head_channels must share one length")
        if self.spatial_rank not in (2, 3):
            raise RangeError("spatial_rank must be 2 or 3")
        if self.cross_attention_dim and not any(self.attention_levels):
            raise RangeError("cross-attention requires at least one attention level")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("channels", "attention_levels", "head_channels"):
            d[k] = list(d[k])
        return d


class _DownPath(nn.Module):
    """conv_in + down levels + middle block; shared by UNet, encoder and ControlNet."""

    def __init__(self, cfg: UNetConfig, in_channels: Optional[int] = None):
        super().__init__()
        r, g, ch = cfg.spatial_rank, cfg.norm_groups, cfg.channels
        emb_dim = 4 * ch[0]
        self.time_embed = TimestepEmbedding(ch[0], emb_dim)
        self.class_embed = nn.Embedding(cfg.num_class_embeds, emb_dim) if cfg.num_class_embeds else None
        self.conv_in = conv_nd(r, in_channels or cfg.in_channels, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.skip_channels = [ch[0]]
        prev = ch[0]
        for level, c in enumerate(ch):
            for _ in range(cfg.num_res_blocks):
                attn = (SpatialTransformer(r, c, cfg.head_channels[level], g, cfg.cross_attention_dim)
                        if cfg.attention_levels[level] else None)
                self.down.append(nn.ModuleDict({"res": ResBlock(r, prev, c, g, emb_dim),
                                                **({"attn": attn} if attn is not None else {})}))
                self.skip_channels.append(c)
                prev = c
            if level < len(ch) - 1:
                self.down.append(nn.ModuleDict({"down": Downsample(r, c)}))
                self.skip_channels.append(c)
        mid_attn = cfg.attention_levels[-1]
        self.mid_res1 = ResBlock(r, prev, prev, g, emb_dim)
        self.mid_attn = (SpatialTransformer(r, prev, cfg.head_channels[-1], g, cfg.cross_attention_dim)
                         if mid_attn else None)
        self.mid_res2 = ResBlock(r, prev, prev, g, emb_dim)
        self.cfg = cfg

    def embed(self, t: torch.Tensor, class_labels, dtype) -> torch.Tensor:
        emb = self.time_embed(t, dtype)
        if self.class_embed is not None:
            if class_labels is None:
                raise ShapeMismatch("network is class-conditioned; class_labels required")
            emb = emb + self.class_embed(class_labels.long()).to(dtype)
        return emb

    def forward(self, h, emb, context=None, extra_input=None):
        h = self.conv_in(h)
        if extra_input is not None:
            h = h + extra_input
        hs = [h]
        for block in self.down:
            if "down" in block:
                h = block["down"](h)
            else:
                h = block["res"](h, emb)
                if "attn" in block:
                    h = block["attn"](h, context)
            hs.append(h)
        h = self.mid_res1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, context)
        h = self.mid_res2(h, emb)
        return hs, h


def _timesteps(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(batch)
    if t.shape[0] != batch:
        raise ShapeMismatch("one timestep per batch element required")
    return t


def _check_input(cfg: UNetConfig, x: torch.Tensor, context, in_channels: int):
    if x.ndim != cfg.spatial_rank + 2:
        raise ShapeMismatch(f"expected rank-{cfg.spatial_rank} input, got shape {tuple(x.shape)}")
    if x.shape[1] != in_channels:
        raise ShapeMismatch(f"expected {in_channels} channels, got {x.shape[1]}")
    f = cfg.downsample_factor
    if any(d % f for d in x.shape[2:]):
        raise ShapeMismatch(f"spatial dims {tuple(x.shape[2:])} must be divisible by {f}")
    if context is not None:
        if cfg.cross_attention_dim is None:
            raise ContextDimMismatch("network has no cross-attention but context was given")
        if context.ndim != 3 or context.shape[-1] != cfg.cross_attention_dim or context.shape[0] != x.shape[0]:
            raise ContextDimMismatch(
                f"context must be (B, seq, {cfg.cross_attention_dim}), got {tuple(context.shape)}")


class DiffusionModelUNet(nn.Module):
    """Timestep-conditioned UNet for 2D or 3D inputs.

    Cross-attention layers are active only when ``context`` is passed. ControlNet
    residuals can be added to the skip connections and the middle block.
    """

    architecture_id = "diffusion_unet"

    def __init__(self, config: Optional[UNetConfig] = None, **kwargs):
        super().__init__()
        cfg = config or UNetConfig(**kwargs)
        self.config = cfg
        r, g, ch = cfg.spatial_rank, cfg.norm_groups, cfg.channels
        emb_dim = 4 * ch[0]
        self.encoder = _DownPath(cfg)
        skips = list(self.encoder.skip_channels)
        self.up = nn.ModuleList()
        prev = ch[-1]
        for level in reversed(range(len(ch))):
            c = ch[level]
            for _ in range(cfg.num_res_blocks + 1):
                attn = (SpatialTransformer(r, c, cfg.head_channels[level], g, cfg.cross_attention_dim)
                        if cfg.attention_levels[level] else None)
                self.up.append(nn.ModuleDict({"res": ResBlock(r, prev + skips.pop(), c, g, emb_dim),
                                              **({"attn": attn} if attn is not None else {})}))
                prev = c
            if level > 0:
                self.up.append(nn.ModuleDict({"up": Upsample(r, c)}))
        self.out = nn.Sequential(norm(prev, g), nn.SiLU(), conv_nd(r, prev, cfg.out_channels, 3, padding=1))

    def forward(
        self,
        x: torch.Tensor,
        t,
        context: Optional[torch.Tensor] = None,
        class_labels: Optional[torch.Tensor] = None,
        down_residuals: Optional[List[torch.Tensor]] = None,
        mid_residual: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        cfg = self.config
        _check_input(cfg, x, context, cfg.in_channels)
        emb = self.encoder.embed(_timesteps(t, x.shape[0]), class_labels, x.dtype)
        hs, h = self.encoder(x, emb, context)
        if down_residuals is not None:
            if len(down_residuals) != len(hs):
                raise ShapeMismatch(f"expected {len(hs)} down residuals, got {len(down_residuals)}")
            hs = [a + b for a, b in zip(hs, down_residuals)]
        if mid_residual is not None:
            h = h + mid_residual
        for block in self.up:
            if "up" in block:
                h = block["up"](h)
            else:
                h = block["res"](torch.cat([h, hs.pop()], dim=1), emb)
                if "attn" in block:
                    h = block["attn"](h, context)
        return self.out(h)


def unet_forward(net: DiffusionModelUNet, x_t, t, context=None, **kwargs) -> torch.Tensor:
    return net(x_t, t, context, **kwargs)


class DiffusionModelEncoder(nn.Module):
    """UNet down path followed by global pooling and an affine head."""

    architecture_id = "diffusion_encoder"

    def __init__(self, config: Optional[UNetConfig] = None, latent_dim: int = 16, **kwargs):
        super().__init__()
        cfg = config or UNetConfig(**kwargs)
        self.config = cfg
        self.latent_dim = latent_dim
        self.encoder = _DownPath(cfg)
        c = cfg.channels[-1]
        self.head = nn.Sequential(norm(c, cfg.norm_groups), nn.SiLU())
        self.out = nn.Linear(c, latent_dim)

    def forward(self, x, t, context=None, class_labels=None) -> torch.Tensor:
        cfg = self.config
        _check_input(cfg, x, context, cfg.in_channels)
        emb = self.encoder.embed(_timesteps(t, x.shape[0]), class_labels, x.dtype)
        _, h = self.encoder(x, emb, context)
        h = self.head(h).flatten(2).mean(-1)
        return self.out(h)


def diffusion_encoder_forward(net: DiffusionModelEncoder, x_t, t) -> torch.Tensor:
    return net(x_t, t)


class ConditioningEmbedding(nn.Module):
    """Convolutional encoder taking the conditioning image to latent resolution.

    One stride-2 convolution sits between consecutive channel levels; the
    output projection is zero-initialised.
    """

    def __init__(self, rank: int, in_channels: int, channels: Sequence[int], out_channels: int):
        super().__init__()
        layers: List[nn.Module] = [conv_nd(rank, in_channels, channels[0], 3, padding=1), nn.SiLU()]
        for a, b in zip(channels[:-1], channels[1:]):
            layers += [conv_nd(rank, a, b, 3, stride=2, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.out = zero_module(conv_nd(rank, channels[-1], out_channels, 3, padding=1))
        self.factor = 2 ** (len(channels) - 1)

    def forward(self, c):
        return self.out(self.body(c))


class ControlNet(nn.Module):
    """Adapter producing residuals for a frozen UNet's skip and middle features.

    Every residual-emitting projection is zero-initialised, so a fresh adapter
    leaves the UNet output unchanged.
    """

    architecture_id = "controlnet"

    def __init__(self, config: Optional[UNetConfig] = None, conditioning_channels: int = 1,
                 conditioning_embedding_channels: Sequence[int] = (16,), **kwargs):
        super().__init__()
        cfg = config or UNetConfig(**kwargs)
        self.config = cfg
        self.conditioning_channels = conditioning_channels
        self.conditioning_embedding_channels = tuple(conditioning_embedding_channels)
        r = cfg.spatial_rank
        self.encoder = _DownPath(cfg)
        self.cond_embed = ConditioningEmbedding(r, conditioning_channels, self.conditioning_embedding_channels,
                                                cfg.channels[0])
        self.zero_convs = nn.ModuleList(
            zero_module(conv_nd(r, c, c, 1)) for c in self.encoder.skip_channels)
        self.mid_zero_conv = zero_module(conv_nd(r, cfg.channels[-1], cfg.channels[-1], 1))

    @classmethod
    def from_unet(cls, unet: DiffusionModelUNet, conditioning_channels: int = 1,
                  conditioning_embedding_channels: Sequence[int] = (16,)) -> "ControlNet":
        ctrl = cls(UNetConfig(**unet.config.to_dict()), conditioning_channels, conditioning_embedding_channels)
        ctrl.encoder.load_state_dict(unet.encoder.state_dict())
        return ctrl

    def forward(self, x, t, conditioning, context=None, class_labels=None, conditioning_scale: float = 1.0
                ) -> Tuple[List[torch.Tensor], torch.Tensor]:
        cfg = self.config
        _check_input(cfg, x, context, cfg.in_channels)
        f = self.cond_embed.factor
        expected = tuple(d * f for d in x.shape[2:])
        if conditioning.ndim != x.ndim or tuple(conditioning.shape[2:]) != expected:
            raise ShapeMismatch(f"conditioning spatial dims must be {expected}, got {tuple(conditioning.shape[2:])}")
        emb = self.encoder.embed(_timesteps(t, x.shape[0]), class_labels, x.dtype)
        hs, h = self.encoder(x, emb, context, extra_input=self.cond_embed(conditioning))
        down = [conv(a) * conditioning_scale for conv, a in zip(self.zero_convs, hs)]
        mid = self.mid_zero_conv(h) * conditioning_scale
        return down, mid


def controlnet_forward(ctrl: ControlNet, x_t, t, conditioning_image, context=None, **kwargs):
    return ctrl(x_t, t, conditioning_image, context, **kwargs)


def combined_forward(unet: DiffusionModelUNet, ctrl: ControlNet, x_t, t, conditioning_image,
                     context=None, class_labels=None, conditioning_scale: float = 1.0) -> torch.Tensor:
    down, mid = ctrl(x_t, t, conditioning_image, context, class_labels, conditioning_scale)
    return unet(x_t, t, context, class_labels, down_residuals=down, mid_residual=mid)
