"""Patch discriminators and SPADE normalisation."""
from __future__ import annotations

from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..foundation import InputTooSmall, NotOneHot, RangeError, ShapeMismatch
from .blocks import avg_pool_nd, conv_nd


def _norm_layer(kind: str, rank: int, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch) if rank == 2 else nn.BatchNorm3d(ch)
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True) if rank == 2 else nn.InstanceNorm3d(ch, affine=True)
    if kind == "none":
        return nn.Identity()
    raise RangeError(f"unknown norm {kind!r}")


class PatchDiscriminator(nn.Module):
    """Pix2Pix-style patch discriminator returning a logits map.

    ``num_layers`` stride-2 convolutions (the first without normalisation), one
    stride-1 convolution, then a stride-1 single-channel output convolution;
    all kernels 4 with padding 1 and LeakyReLU(0.2).
    """

    architecture_id = "patch_discriminator"

    def __init__(self, spatial_rank: int = 2, in_channels: int = 1, channels: int = 64, num_layers: int = 3,
                 norm: str = "batch"):
        super().__init__()
        self.spatial_rank, self.num_layers = spatial_rank, num_layers
        self.config = dict(spatial_rank=spatial_rank, in_channels=in_channels, channels=channels,
                           num_layers=num_layers, norm=norm)
        r = spatial_rank
        layers: List[nn.Module] = [conv_nd(r, in_channels, channels, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, num_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [conv_nd(r, channels * prev, channels * mult, 4, stride=2, padding=1, bias=norm == "none"),
                       _norm_layer(norm, r, channels * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2**num_layers, 8)
        layers += [conv_nd(r, channels * prev, channels * mult, 4, stride=1, padding=1, bias=norm == "none"),
                   _norm_layer(norm, r, channels * mult), nn.LeakyReLU(0.2),
                   conv_nd(r, channels * mult, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def output_size(self, size: int) -> int:
        for _ in range(self.num_layers):
            size = (size + 2 - 4) // 2 + 1
        for _ in range(2):
            size = size + 2 - 4 + 1
        return size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != self.spatial_rank + 2:
            raise ShapeMismatch(f"expected rank-{self.spatial_rank} input")
        # every intermediate size must stay positive
        for d in x.shape[2:]:
            if d < 2 ** self.num_layers or self.output_size(int(d)) < 1:
                raise InputTooSmall(f"input dim {d} too small for {self.num_layers}-layer discriminator")
        return self.model(x)


class MultiScalePatchDiscriminator(nn.Module):
    """Independent patch discriminators on progressively 2x-downsampled copies."""

    architecture_id = "multiscale_patch_discriminator"

    def __init__(self, num_discriminators: int = 2, **kwargs):
        super().__init__()
        self.discriminators = nn.ModuleList(PatchDiscriminator(**kwargs) for _ in range(num_discriminators))
        self.config = dict(num_discriminators=num_discriminators, **kwargs)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        out = []
        r = x.ndim - 2
        for i, d in enumerate(self.discriminators):
            if i > 0:
                x = avg_pool_nd(r, x, 2)
            out.append(d(x))
        return out


def patch_discriminator_forward(net: PatchDiscriminator, x):
    return net(x)


def multiscale_forward(nets: MultiScalePatchDiscriminator, x):
    return nets(x)


class SPADENorm(nn.Module):
    """Parameter-free normalisation modulated per pixel by a segmentation map.

    ``out = norm(x) * (1 + gamma(seg)) + beta(seg)``.
    """

    def __init__(self, norm_channels: int, label_channels: int, hidden: int = 32, spatial_rank: int = 2,
                 norm: str = "instance", zero_init: bool = False):
        super().__init__()
        r = spatial_rank
        self.spatial_rank = r
        if norm == "instance":
            self.param_free = nn.InstanceNorm2d(norm_channels) if r == 2 else nn.InstanceNorm3d(norm_channels)
        elif norm == "batch":
            self.param_free = (nn.BatchNorm2d(norm_channels, affine=False) if r == 2
                               else nn.BatchNorm3d(norm_channels, affine=False))
        else:
            raise RangeError(f"unknown norm {norm!r}")
        self.shared = nn.Sequential(conv_nd(r, label_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = conv_nd(r, hidden, norm_channels, 3, padding=1)
        self.beta = conv_nd(r, hidden, norm_channels, 3, padding=1)
        if zero_init:
            for m in (self.gamma, self.beta):
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor, segmap: torch.Tensor) -> torch.Tensor:
        if segmap.ndim != x.ndim or segmap.shape[0] != x.shape[0]:
            raise ShapeMismatch("segmentation map must be (B, labels, *spatial) matching the features")
        ok = ((segmap == 0) | (segmap == 1)).all() and bool((segmap.sum(1) == 1).all())
        if not ok:
            raise NotOneHot("segmentation map must be one-hot over the label axis")
        normalized = self.param_free(x)
        seg = F.interpolate(segmap.to(x.dtype), size=x.shape[2:], mode="nearest")
        h = self.shared(seg)
        return normalized * (1 + self.gamma(h)) + self.beta(h)


def spade_norm(features, segmentation_map, params: SPADENorm):
    return params(features, segmentation_map)
