"""Training objectives for compression, adversarial and diffusion models."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .foundation import (
    ExtractorMissing,
    ModeMismatch,
    RandomSource,
    RangeError,
    ShapeMismatch,
    UnknownCriterion,
    as_generator,
    as_random_source,
)
from .schedulers import NoiseSchedule, add_noise, training_target

# Composite autoencoder objective weights.
ADVERSARIAL_WEIGHT = 0.005
PERCEPTUAL_WEIGHT = 0.002
KL_WEIGHT = 1e-8


def spectral_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared modulus of the orthonormal DFT difference, summed over frequencies.

    Averaged over batch and channels. By Parseval this equals the per-image sum
    of squared pixel differences.
    """
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    dims = tuple(range(2, x.ndim))
    diff = torch.fft.fftn(x - y, dim=dims, norm="ortho")
    return (diff.real**2 + diff.imag**2).sum(dim=dims).mean()


CRITERIA = ("least_squares", "hinge", "bce")


def adversarial_loss(
    logits: Union[torch.Tensor, Sequence[torch.Tensor]],
    target_is_real: bool,
    for_discriminator: bool,
    criterion: str = "least_squares",
) -> torch.Tensor:
    """Patch-adversarial loss; lists of logits maps are averaged.

    The generator hinge loss is ``-mean(logit)`` and is unbounded below; every
    other variant is non-negative.
    """
    if criterion not in CRITERIA:
        raise UnknownCriterion(criterion)
    maps = list(logits) if isinstance(logits, (list, tuple)) else [logits]
    total = 0.0
    for m in maps:
        if criterion == "least_squares":
            label = 1.0 if target_is_real else 0.0
            total = total + ((m - label) ** 2).mean()
        elif criterion == "bce":
            label = torch.full_like(m, 1.0 if target_is_real else 0.0)
            total = total + F.binary_cross_entropy_with_logits(m, label)
        elif for_discriminator:
            total = total + (F.relu(1.0 - m).mean() if target_is_real else F.relu(1.0 + m).mean())
        else:
            total = total - m.mean()
    return total / len(maps)


class RandomConvExtractor(nn.Module):
    """Frozen, seeded random convolutional stack for 2D images.

    Multi-channel inputs are averaged to one channel first. ``forward`` returns
    the activations of every layer.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 16), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 1
        for i, c in enumerate(channels):
            conv = nn.Conv2d(prev, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers.append(conv)
            prev = c
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = x.mean(dim=1, keepdim=True)
        feats = []
        for conv in self.layers:
            w, b = conv.weight.to(h.dtype), conv.bias.to(h.dtype)
            h = F.leaky_relu(F.conv2d(h, w, b, stride=conv.stride, padding=conv.padding), 0.2)
            feats.append(h)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled features of every layer, concatenated."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self(x)], dim=1)


_EXTRACTORS: Dict[str, Callable[[], nn.Module]] = {}
_EXTRACTOR_CACHE: Dict[str, nn.Module] = {}


def register_extractor(extractor_id: str, factory: Callable[[], nn.Module]) -> None:
    _EXTRACTORS[extractor_id] = factory
    _EXTRACTOR_CACHE.pop(extractor_id, None)


def _build_random_conv() -> nn.Module:
    net = RandomConvExtractor()
    cache = os.environ.get("GENIMG_CACHE")
    if cache:
        path = Path(cache) / "random_conv_v1.pt"
        if path.exists():
            net.load_state_dict(torch.load(path, weights_only=True))
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(net.state_dict(), path)
    return net


register_extractor("random_conv", _build_random_conv)


def get_extractor(extractor_id: str = "random_conv") -> nn.Module:
    if extractor_id not in _EXTRACTORS:
        raise ExtractorMissing(f"no feature extractor registered as {extractor_id!r}")
    if extractor_id not in _EXTRACTOR_CACHE:
        _EXTRACTOR_CACHE[extractor_id] = _EXTRACTORS[extractor_id]()
    return _EXTRACTOR_CACHE[extractor_id]


@dataclass
class PerceptualConfig:
    extractor_id: str = "random_conv"
    layer_weights: Optional[Sequence[float]] = None
    mode: str = "full_2d"
    slice_fraction: float = 0.25

    def __post_init__(self):
        if self.mode not in ("full_2d", "slice_2p5d"):
            raise ModeMismatch(f"unknown mode {self.mode!r}")
        if not 0.0 < self.slice_fraction <= 1.0:
            raise RangeError("slice_fraction must lie in (0, 1]")


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f**2).sum(dim=1, keepdim=True) + eps)


def _perceptual_2d(extractor: nn.Module, x, y, weights: Optional[Sequence[float]]) -> torch.Tensor:
    fx, fy = extractor(x), extractor(y)
    w = weights if weights is not None else [1.0 / len(fx)] * len(fx)
    total = 0.0
    for wi, a, b in zip(w, fx, fy):
        total = total + wi * ((_unit(a) - _unit(b)) ** 2).sum(dim=1).mean()
    return total


def sample_slices(n: int, fraction: float, rng) -> List[int]:
    k = math.ceil(fraction * n)
    gen = as_random_source(rng).numpy() if not hasattr(rng, "choice") else rng
    return sorted(int(i) for i in gen.choice(n, size=k, replace=False))


def perceptual_loss(x: torch.Tensor, y: torch.Tensor, cfg: Optional[PerceptualConfig] = None,
                    rng: Union[RandomSource, int, None] = None, extractor: Optional[nn.Module] = None) -> torch.Tensor:
    """Weighted feature distance between unit-normalised activations.

    In ``slice_2p5d`` mode a 3D volume is scored by the 2D extractor on
    ``ceil(fraction * n)`` slices drawn without replacement, independently for
    each of the three orientations; slice losses are averaged.
    """
    cfg = cfg or PerceptualConfig()
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    net = extractor if extractor is not None else get_extractor(cfg.extractor_id)
    rank = x.ndim - 2
    if cfg.mode == "full_2d":
        if rank != 2:
            raise ModeMismatch("3D input requires slice_2p5d mode")
        return _perceptual_2d(net, x, y, cfg.layer_weights)
    if rank != 3:
        raise ModeMismatch("slice_2p5d mode requires 3D input")
    gen = as_random_source(rng).numpy()
    per_orientation = []
    for axis in (2, 3, 4):
        idx = sample_slices(x.shape[axis], cfg.slice_fraction, gen)
        losses = []
        for i in idx:
            xs, ys = x.select(axis, i), y.select(axis, i)
            losses.append(_perceptual_2d(net, xs, ys, cfg.layer_weights))
        per_orientation.append(torch.stack(losses).mean())
    return torch.stack(per_orientation).mean()


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed per sample, averaged over the batch."""
    if mu.shape != log_var.shape:
        raise ShapeMismatch(f"{tuple(mu.shape)} vs {tuple(log_var.shape)}")
    var = torch.exp(log_var).clamp(1e-8, 1e8)
    per = 0.5 * (mu**2 + var - log_var - 1.0)
    return per.reshape(per.shape[0], -1).sum(dim=1).mean()


def diffusion_training_loss(
    net: Callable,
    x0: torch.Tensor,
    schedule: NoiseSchedule,
    rng: Union[RandomSource, torch.Generator, int, None] = None,
    context: Optional[torch.Tensor] = None,
    cond_dropout_prob: float = 0.0,
    null_context: Optional[torch.Tensor] = None,
    **net_kwargs,
) -> torch.Tensor:
    """Denoising regression loss for the schedule's prediction type.

    Samples ``t`` uniformly in ``1..T`` and noise, forms ``x_t``, and with
    probability ``cond_dropout_prob`` swaps each context row for the null
    (all-zeros) embedding before calling ``net(x_t, t, context, **net_kwargs)``.
    """
    if not 0.0 <= cond_dropout_prob <= 1.0:
        raise RangeError("cond_dropout_prob must lie in [0, 1]")
    gen = as_generator(rng)
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x_t = add_noise(x0, noise, t, schedule)
    if context is not None:
        null = torch.zeros_like(context) if null_context is None else null_context.expand_as(context)
        drop = torch.rand(b, generator=gen) < cond_dropout_prob
        context = torch.where(drop.view(-1, *([1] * (context.ndim - 1))), null, context)
    out = net(x_t, t, context, **net_kwargs)
    target = training_target(x0, noise, t, schedule)
    return F.mse_loss(out, target)
