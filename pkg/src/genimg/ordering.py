"""Bijective flattenings of 2D/3D index grids into token sequences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .foundation import RandomSource, RangeError, ShapeMismatch

KINDS = ("raster", "s_curve", "random")


@dataclass(frozen=True, eq=False)
class Ordering:
    """A permutation over row-major flat indices of ``spatial_shape``.

    ``permutation[i]`` is the flat grid index placed at sequence position ``i``.
    """

    kind: str
    spatial_shape: Tuple[int, ...]
    permutation: np.ndarray
    seed: Optional[int] = None

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return inv

    def metadata(self) -> dict:
        return {"kind": self.kind, "spatial_shape": list(self.spatial_shape), "seed": self.seed}

    @classmethod
    def from_metadata(cls, meta: dict) -> "Ordering":
        return build_ordering(meta["kind"], tuple(meta["spatial_shape"]), meta.get("seed"))

    def apply(self, grid_values):
        return apply(self, grid_values)

    def invert(self, sequence):
        return invert(self, sequence)


def _s_curve(shape: Tuple[int, ...]) -> np.ndarray:
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    if len(shape) == 1:
        return idx
    if len(shape) == 2:
        rows = [idx[r] if r % 2 == 0 else idx[r, ::-1] for r in range(shape[0])]
        return np.concatenate(rows)
    # 3D: serpentine per slice; odd slices traverse the slice path backwards so
    # the last voxel of one slice is adjacent to the first of the next
    path = []
    for d in range(shape[0]):
        slice_path = _s_curve(shape[1:]) + d * shape[1] * shape[2]
        path.append(slice_path if d % 2 == 0 else slice_path[::-1])
    return np.concatenate(path)


def build_ordering(kind: str, spatial_shape: Sequence[int], seed: Optional[int] = None) -> Ordering:
    shape = tuple(int(s) for s in spatial_shape)
    if not shape or any(s < 1 for s in shape):
        raise RangeError(f"all dims must be >= 1, got {shape}")
    n = int(np.prod(shape))
    if kind == "raster":
        perm = np.arange(n)
    elif kind == "s_curve":
        perm = _s_curve(shape)
    elif kind == "random":
        seed = 0 if seed is None else int(seed)
        perm = np.arange(n)
        rng = RandomSource(seed).numpy()
        # explicit Fisher-Yates over platform-independent integer draws
        for i in range(n - 1, 0, -1):
            j = int(rng.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
    else:
        raise RangeError(f"unknown ordering kind {kind!r}")
    return Ordering(kind, shape, perm.astype(np.int64), seed if kind == "random" else None)


def apply(ordering: Ordering, grid_values):
    """Flatten grids (optionally batched on leading dims) into sequences."""
    k = len(ordering.spatial_shape)
    if tuple(grid_values.shape[-k:]) != ordering.spatial_shape:
        raise ShapeMismatch(f"grid {tuple(grid_values.shape)} does not end with {ordering.spatial_shape}")
    lead = tuple(grid_values.shape[:-k])
    flat = grid_values.reshape(*lead, -1)
    return flat[..., _index(ordering.permutation, flat)]


def invert(ordering: Ordering, sequence):
    n = ordering.permutation.size
    if sequence.shape[-1] != n:
        raise ShapeMismatch(f"sequence length {sequence.shape[-1]} != {n}")
    lead = tuple(sequence.shape[:-1])
    grid = sequence[..., _index(ordering.inverse, sequence)]
    return grid.reshape(*lead, *ordering.spatial_shape)


def _index(perm: np.ndarray, like):
    if isinstance(like, np.ndarray):
        return perm
    import torch

    return torch.as_tensor(perm, device=like.device)
