"""Sampling and likelihood workflows built on the schedulers and networks."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .foundation import (
    EmptyBatch,
    RandomSource,
    RangeError,
    ShapeMismatch,
    TilingMismatch,
    as_random_source,
    to_numpy,
)
from .metrics import MetricReport, auc
from .networks.transformer import sequence_log_likelihood
from .networks.unet import combined_forward
from .ordering import Ordering, apply
from .schedulers import NoiseSchedule, add_noise, build_schedule, make_sampler

ModelFn = Callable[..., torch.Tensor]


@dataclass
class GuidanceConfig:
    """Classifier-free guidance weight and the null conditioning embedding."""

    weight: float = 1.0
    null_context: Optional[torch.Tensor] = None

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise RangeError("guidance weight must be finite and >= 0")


def guided_prediction(net: ModelFn, x, t, context, guidance: GuidanceConfig, **kwargs):
    """``uncond + w * (cond - uncond)`` on the raw network output."""
    w = guidance.weight
    if context is None:
        return net(x, t, None, **kwargs)
    null = guidance.null_context
    null = torch.zeros_like(context) if null is None else null.to(context.dtype).expand_as(context)
    if w == 1.0:
        return net(x, t, context, **kwargs)
    if w == 0.0:
        return net(x, t, null, **kwargs)
    uncond = net(x, t, null, **kwargs)
    cond = net(x, t, context, **kwargs)
    return uncond + w * (cond - uncond)


@torch.no_grad()
def sample(
    unet: ModelFn,
    scheduler_kind: str,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    rng: Union[RandomSource, int, None] = None,
    context: Optional[torch.Tensor] = None,
    guidance: Optional[GuidanceConfig] = None,
    num_inference_steps: Optional[int] = 50,
    eta: float = 0.0,
    spacing: str = "linspace",
    generator: Optional[torch.Generator] = None,
    **net_kwargs,
) -> torch.Tensor:
    """Run the reverse process from Gaussian noise.

    The initial state equals ``draw_gaussian(shape, rng)``; later stochastic
    draws continue on the same generator. ``net_kwargs`` are forwarded to every
    network call.
    """
    guidance = guidance or GuidanceConfig()
    gen = generator if generator is not None else as_random_source(rng).torch()
    sampler = make_sampler(scheduler_kind, schedule, num_inference_steps, spacing, eta)
    x = torch.randn(tuple(shape), generator=gen)
    for t in sampler.timesteps:
        out = guided_prediction(unet, x, t, context, guidance, **net_kwargs)
        x = sampler.step(out, t, x, gen)
    return x


@torch.no_grad()
def latent_sample(
    unet: ModelFn,
    decoder: Callable[[torch.Tensor], torch.Tensor],
    schedule: NoiseSchedule,
    latent_shape: Sequence[int],
    scale_factor: float = 1.0,
    scheduler_kind: str = "ddim",
    rng=None,
    **kwargs,
) -> torch.Tensor:
    z = sample(unet, scheduler_kind, schedule, latent_shape, rng, **kwargs)
    return decoder(z / scale_factor)


@torch.no_grad()
def compute_scale_factor(encoder: Callable[[torch.Tensor], torch.Tensor], calibration_batch) -> float:
    """Reciprocal of the (population) standard deviation of encoded latents."""
    if calibration_batch is None or len(calibration_batch) == 0:
        raise EmptyBatch("calibration batch is empty")
    z = encoder(calibration_batch) if callable(encoder) else calibration_batch
    return float(1.0 / z.double().std(correction=0))


@torch.no_grad()
def token_log_likelihood(transformer, ordering: Ordering, index_grids: torch.Tensor, num_codes: int,
                         bos_token: Optional[int] = None) -> torch.Tensor:
    """Log-likelihood of codebook index grids ``(B, *spatial)`` under ``ordering``."""
    seq = apply(ordering, index_grids).reshape(index_grids.shape[0], -1)
    bos = num_codes if bos_token is None else bos_token
    return sequence_log_likelihood(transformer, seq, bos, num_codes)


@torch.no_grad()
def transformer_log_likelihood(vqvae, transformer, ordering: Ordering, x: torch.Tensor) -> torch.Tensor:
    """Per-image natural-log likelihood: encode, quantise, order, prepend BOS, sum log-probs.

    Images are scored one at a time so results do not depend on batch
    composition.
    """
    num_codes = vqvae.quantizer.num_embeddings
    out = []
    for i in range(x.shape[0]):
        idx = vqvae.index_quantize(x[i : i + 1])
        out.append(token_log_likelihood(transformer, ordering, idx, num_codes))
    return torch.cat(out)


def ood_score(log_likelihood_fn: Callable[[torch.Tensor], torch.Tensor], in_data, out_data,
              seed: Optional[int] = None, config_hash: Optional[str] = None) -> dict:
    """Negative log-likelihood scores and the AUC separating in- from out-of-distribution.

    In-distribution images are expected to score low (high likelihood).
    """
    ll_in = to_numpy(log_likelihood_fn(in_data)).astype(np.float64)
    ll_out = to_numpy(log_likelihood_fn(out_data)).astype(np.float64)
    scores_in, scores_out = -ll_in, -ll_out
    value = auc(-scores_in, -scores_out)
    report = MetricReport("auc", value, int(len(scores_in) + len(scores_out)), seed, config_hash)
    return {"scores_in": scores_in, "scores_out": scores_out, "report": report}


def controlnet_model_fn(unet, controlnet, conditioning_image, conditioning_scale: float = 1.0) -> ModelFn:
    def fn(x, t, context=None, **kwargs):
        cond = conditioning_image
        if cond.shape[0] != x.shape[0]:
            cond = cond.expand(x.shape[0], *cond.shape[1:])
        return combined_forward(unet, controlnet, x, t, cond, context, conditioning_scale=conditioning_scale,
                                **kwargs)

    return fn


@torch.no_grad()
def translate(unet, controlnet, schedule: NoiseSchedule, conditioning_image: torch.Tensor,
              shape: Sequence[int], decoder: Optional[Callable] = None, scale_factor: float = 1.0,
              scheduler_kind: str = "ddim", rng=None, **kwargs) -> torch.Tensor:
    """Sample with every UNet call routed through the ControlNet adapter."""
    fn = controlnet_model_fn(unet, controlnet, conditioning_image)
    z = sample(fn, scheduler_kind, schedule, shape, rng, **kwargs)
    return decoder(z / scale_factor) if decoder is not None else z


DEFAULT_AUG_T = 350


def default_aug_schedule() -> NoiseSchedule:
    return build_schedule("linear", DEFAULT_AUG_T, 1e-4, 0.02, prediction_type="epsilon")


@dataclass
class UpscalerConditioning:
    low_res: torch.Tensor
    noise_level: int = 1
    aug_schedule: NoiseSchedule = field(default_factory=default_aug_schedule)

    def __post_init__(self):
        if not 0 <= int(self.noise_level) <= self.aug_schedule.T:
            raise RangeError(f"noise_level must lie in 0..{self.aug_schedule.T}")


@dataclass
class TileSpec:
    """Tiling of the low-resolution grid; the output tile is ``factor`` times larger."""

    tile_dims: Tuple[int, ...]
    overlap: Tuple[int, ...] = (0, 0)
    blend: str = "linear_ramp"

    def __post_init__(self):
        self.tile_dims = tuple(int(d) for d in self.tile_dims)
        ov = tuple(int(o) for o in self.overlap)
        if len(ov) == 1:
            ov = ov * len(self.tile_dims)
        self.overlap = ov
        if len(self.overlap) != len(self.tile_dims):
            raise RangeError("overlap needs one entry per tile dim")
        if any(o < 0 or o >= d for o, d in zip(self.overlap, self.tile_dims)):
            raise RangeError("overlap must satisfy 0 <= overlap < tile dim")
        if self.blend not in ("average", "linear_ramp"):
            raise RangeError(f"unknown blend {self.blend!r}")


def tile_starts(size: int, tile: int, overlap: int) -> List[int]:
    if tile > size:
        raise TilingMismatch(f"tile {tile} larger than image {size}")
    step = tile - overlap
    if (size - tile) % step:
        raise TilingMismatch(f"tiles of {tile} with overlap {overlap} do not cover {size} exactly")
    return list(range(0, size - tile + 1, step))


def tile_grid(spatial: Sequence[int], tiles: TileSpec) -> List[Tuple[slice, ...]]:
    if len(spatial) != len(tiles.tile_dims):
        raise TilingMismatch("tile rank differs from image rank")
    per_dim = [tile_starts(s, d, o) for s, d, o in zip(spatial, tiles.tile_dims, tiles.overlap)]
    return [tuple(slice(s, s + d) for s, d in zip(starts, tiles.tile_dims)) for starts in itertools.product(*per_dim)]


def blend_weights(tile_shape: Sequence[int], overlap: Sequence[int], blend: str) -> torch.Tensor:
    w = torch.ones(tuple(tile_shape), dtype=torch.float64)
    if blend == "average":
        return w
    for axis, (n, ov) in enumerate(zip(tile_shape, overlap)):
        if ov == 0:
            continue
        i = torch.arange(n, dtype=torch.float64)
        ramp = torch.minimum(torch.ones(n, dtype=torch.float64), torch.minimum(i + 1, n - i) / (ov + 1))
        shape = [1] * len(tile_shape)
        shape[axis] = n
        w = w * ramp.view(shape)
    return w


def blend_tiles(out_shape: Sequence[int], pieces: Sequence[Tuple[Tuple[slice, ...], torch.Tensor]],
                overlap: Sequence[int], blend: str) -> torch.Tensor:
    """Weighted average of ``(region, tile)`` pieces into a ``(B, C, *spatial)`` canvas."""
    acc = torch.zeros(tuple(out_shape), dtype=torch.float64)
    norm = torch.zeros(tuple(out_shape[2:]), dtype=torch.float64)
    for region, tile in pieces:
        w = blend_weights(tile.shape[2:], overlap, blend)
        acc[(slice(None), slice(None), *region)] += tile.double() * w
        norm[region] += w
    return (acc / norm).to(pieces[0][1].dtype)


def upscaler_model_fn(unet, low_res_cond: torch.Tensor, noise_level: int) -> ModelFn:
    def fn(x, t, context=None, **kwargs):
        labels = torch.full((x.shape[0],), int(noise_level), dtype=torch.long)
        return unet(torch.cat([x, low_res_cond], dim=1), t, context, class_labels=labels, **kwargs)

    return fn


def augment_low_res(low_res: torch.Tensor, noise_level: int, aug_schedule: NoiseSchedule,
                    generator: torch.Generator) -> torch.Tensor:
    if int(noise_level) == 0:
        return low_res
    noise = torch.randn(low_res.shape, generator=generator, dtype=low_res.dtype)
    return add_noise(low_res, noise, int(noise_level), aug_schedule)


@torch.no_grad()
def upscale(
    unet,
    decoder: Optional[Callable],
    schedule: NoiseSchedule,
    cond: UpscalerConditioning,
    tiles: Optional[TileSpec] = None,
    rng=None,
    latent_channels: int = 4,
    latent_ratio: int = 1,
    output_factor: int = 2,
    scale_factor: float = 1.0,
    scheduler_kind: str = "ddim",
    num_inference_steps: int = 50,
    resample_mode: str = "nearest",
) -> torch.Tensor:
    """Noise-augmented, tiled super-resolution.

    Per tile of the low-resolution image: augment it to ``cond.noise_level``,
    resample it to latent resolution (``latent_ratio`` times the low-res
    grid), concatenate it channel-wise with the diffusion state, sample while
    conditioning the network on the noise level, and decode. ``output_factor``
    is the output/low-res size ratio. Tiles draw from one generator in order.
    """
    low = cond.low_res
    spatial = tuple(low.shape[2:])
    tiles = tiles or TileSpec(spatial, (0,) * len(spatial), "average")
    gen = as_random_source(rng).torch()
    pieces = []
    for region in tile_grid(spatial, tiles):
        lr_tile = low[(slice(None), slice(None), *region)]
        aug = augment_low_res(lr_tile, cond.noise_level, cond.aug_schedule, gen)
        latent_dims = tuple(d * latent_ratio for d in lr_tile.shape[2:])
        aug = F.interpolate(aug, size=latent_dims, mode=resample_mode) if latent_ratio != 1 else aug
        fn = upscaler_model_fn(unet, aug, cond.noise_level)
        shape = (low.shape[0], latent_channels, *latent_dims)
        z = sample(fn, scheduler_kind, schedule, shape, generator=gen, num_inference_steps=num_inference_steps)
        out = decoder(z / scale_factor) if decoder is not None else z
        out_region = tuple(slice(s.start * output_factor, s.stop * output_factor) for s in region)
        pieces.append((out_region, out))
    out_shape = (low.shape[0], pieces[0][1].shape[1], *(d * output_factor for d in spatial))
    ov = tuple(o * output_factor for o in tiles.overlap)
    return blend_tiles(out_shape, pieces, ov, tiles.blend)
