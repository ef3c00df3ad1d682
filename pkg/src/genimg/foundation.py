"""Shared types, error classes, randomness and input validation helpers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

ArrayLike = Union[np.ndarray, torch.Tensor]


class GenImgError(Exception):
    """Base class for every error raised by the package."""


class ShapeMismatch(GenImgError, ValueError):
    pass


class RankError(GenImgError, ValueError):
    pass


class NonFiniteValue(GenImgError, ValueError):
    pass


class RangeError(GenImgError, ValueError):
    pass


class TimestepOutOfRange(GenImgError, ValueError):
    pass


class UnknownPredictionType(GenImgError, ValueError):
    pass


class BufferUnderflow(GenImgError, RuntimeError):
    pass


class ContextDimMismatch(GenImgError, ValueError):
    pass


class DivisibilityError(GenImgError, ValueError):
    pass


class DimMismatch(GenImgError, ValueError):
    pass


class NotOneHot(GenImgError, ValueError):
    pass


class InputTooSmall(GenImgError, ValueError):
    pass


class SequenceTooLong(GenImgError, ValueError):
    pass


class TokenOutOfVocab(GenImgError, ValueError):
    pass


class UnknownCriterion(GenImgError, ValueError):
    pass


class ExtractorMissing(GenImgError, LookupError):
    pass


class ModeMismatch(GenImgError, ValueError):
    pass


class DegenerateFeatures(GenImgError, ValueError):
    pass


class NumericalFailure(GenImgError, ArithmeticError):
    pass


class NotEnoughSamples(GenImgError, ValueError):
    pass


class EmptyInput(GenImgError, ValueError):
    pass


class EmbedderMissing(GenImgError, LookupError):
    pass


class EmptyBatch(GenImgError, ValueError):
    pass


class TilingMismatch(GenImgError, ValueError):
    pass


class ConfigError(GenImgError, ValueError):
    pass


class IncompatibleCheckpoint(GenImgError, ValueError):
    pass


@dataclass(frozen=True)
class RandomSource:
    """Seeded, stream-separated source of randomness.

    The same ``(seed, stream_id)`` pair always yields the same draws. Integer
    draws come from numpy's PCG64 and are platform independent; real-valued
    draws from the torch generator are reproducible within one build.
    """

    seed: int
    stream_id: int = 0

    def _seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream_id),))

    def numpy(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._seed_sequence()))

    def torch(self) -> torch.Generator:
        state = self._seed_sequence().generate_state(2, dtype=np.uint32)
        seed = (int(state[0]) << 31) ^ int(state[1])
        return torch.Generator().manual_seed(seed)

    def stream(self, stream_id: int) -> "RandomSource":
        return RandomSource(self.seed, stream_id)


def as_random_source(rng: Union[RandomSource, int, None]) -> RandomSource:
    if rng is None:
        return RandomSource(0)
    if isinstance(rng, RandomSource):
        return rng
    return RandomSource(int(rng))


def as_generator(rng: Union[RandomSource, torch.Generator, int, None]) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return as_random_source(rng).torch()


def validate_batch(x: torch.Tensor) -> torch.Tensor:
    """Check the image batch invariants and return ``x`` unchanged.

    Layout is channel-first ``(B, C, *spatial)`` with 2 or 3 spatial dims.
    """
    if x.ndim not in (4, 5):
        raise RankError(f"expected (B, C, D1..Dk) with k in (2, 3), got shape {tuple(x.shape)}")
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteValue("batch contains NaN or Inf")
    return x


def spatial_rank(x: torch.Tensor) -> int:
    return x.ndim - 2


def check_images(X: ArrayLike, *, spatial_dims: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Convert array-likes to a validated channel-first float tensor.

    Accepts ``(B, C, ...)`` batches or ``(B, ...)`` single-channel stacks when
    ``spatial_dims`` is given.
    """
    if isinstance(X, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(X))
    elif isinstance(X, torch.Tensor):
        x = X
    else:
        x = torch.as_tensor(np.asarray(X))
    x = x.to(dtype)
    if spatial_dims is not None and x.ndim == spatial_dims + 1:
        x = x.unsqueeze(1)
    validate_batch(x)
    if spatial_dims is not None and spatial_rank(x) != spatial_dims:
        raise RankError(f"expected {spatial_dims} spatial dims, got {spatial_rank(x)}")
    return x


def draw_gaussian(shape: Sequence[int], rng: Union[RandomSource, int]) -> torch.Tensor:
    """i.i.d. standard normal draws, a pure function of ``(shape, rng)``."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise RangeError(f"invalid shape {shape}")
    return torch.randn(shape, generator=as_random_source(rng).torch())


def to_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)
