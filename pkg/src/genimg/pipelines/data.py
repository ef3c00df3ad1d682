"""Synthetic shapeworld dataset and dataset manifests."""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..foundation import ConfigError, RandomSource, RangeError
from .io import FORMATS, read_array, write_array

SHAPES_2D = ("disc", "square", "cross")
SHAPES_3D = ("ball", "cube", "cross")
SPLITS = ("train", "test")


@dataclass
class ShapeWorldSpec:
    """Generator settings. Sizes are radii as a fraction of ``image_size``."""

    image_size: int = 32
    spatial_rank: int = 2
    classes: Tuple[str, ...] = SHAPES_2D
    size_range: Tuple[float, float] = (0.2, 0.35)
    intensity_range: Tuple[float, float] = (0.6, 1.0)
    max_sentences: int = 2
    test_fraction: float = 0.25
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        allowed = SHAPES_2D if self.spatial_rank == 2 else SHAPES_3D
        if self.spatial_rank not in (2, 3):
            raise RangeError("spatial_rank must be 2 or 3")
        if not self.classes or any(c not in allowed for c in self.classes):
            raise RangeError(f"classes must be drawn from {allowed}")
        lo, hi = self.size_range
        if not 0 < lo <= hi < 0.5:
            raise RangeError("size_range must satisfy 0 < lo <= hi < 0.5")
        lo, hi = self.intensity_range
        if not 0 < lo <= hi <= 1:
            raise RangeError("intensity_range must satisfy 0 < lo <= hi <= 1")
        if self.image_size < 8:
            raise RangeError("image_size must be >= 8")
        if not 0 <= self.test_fraction < 1:
            raise RangeError("test_fraction must lie in [0, 1)")
        if self.max_sentences < 1:
            raise RangeError("max_sentences must be >= 1")

    @classmethod
    def from_file(cls, path) -> "ShapeWorldSpec":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError(f"cannot read spec file {path}")
        if "shapeworld" not in cp:
            raise ConfigError(f"{path}: missing [shapeworld] section")
        sec = cp["shapeworld"]
        kw: Dict[str, object] = {}
        for key, val in sec.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"{path}: unknown key shapeworld.{key}")
            if key == "classes":
                kw[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif key in ("size_range", "intensity_range"):
                kw[key] = tuple(float(v) for v in val.split(","))
            elif key in ("test_fraction",):
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)


def _coverage(spec: ShapeWorldSpec, kind: str, center, radius: float, angle: float) -> np.ndarray:
    n, ss = spec.image_size, spec.supersample
    axes = [(np.arange(n * ss) + 0.5) / ss for _ in range(spec.spatial_rank)]
    grid = np.meshgrid(*axes, indexing="ij")
    d = [g - c for g, c in zip(grid, center)]
    # rotate in the first two axes
    ca, sa = math.cos(angle), math.sin(angle)
    d[0], d[1] = ca * d[0] - sa * d[1], sa * d[0] + ca * d[1]
    a = [np.abs(v) for v in d]
    if kind in ("disc", "ball"):
        inside = sum(v**2 for v in d) <= radius**2
    elif kind in ("square", "cube"):
        inside = np.max(np.stack(a), axis=0) <= radius
    else:
        arm = radius / 3
        inside = np.zeros_like(a[0], dtype=bool)
        for i in range(len(a)):
            others = [a[j] <= arm for j in range(len(a)) if j != i]
            inside |= (a[i] <= radius) & np.logical_and.reduce(others)
    cov = inside.astype(np.float64)
    shape = []
    for _ in range(spec.spatial_rank):
        shape += [n, ss]
    cov = cov.reshape(shape)
    return cov.mean(axis=tuple(range(1, 2 * spec.spatial_rank, 2)))


def _caption(spec: ShapeWorldSpec, kind: str, intensity: float, radius_frac: float, center, rng) -> str:
    shade = "bright" if intensity >= 0.8 else "dim"
    n = spec.image_size
    vert = "top" if center[0] < n / 2 else "bottom"
    horiz = "left" if center[1] < n / 2 else "right"
    size = "large" if radius_frac >= sum(spec.size_range) / 2 else "small"
    sentences = [f"a {shade} {kind}", f"located at the {vert} {horiz}", f"the shape is {size}"]
    k = int(rng.integers(1, min(spec.max_sentences, len(sentences)) + 1))
    extra = sorted(rng.choice(np.arange(1, len(sentences)), size=k - 1, replace=False)) if k > 1 else []
    return ". ".join([sentences[0]] + [sentences[i] for i in extra])


def render_item(spec: ShapeWorldSpec, index: int):
    """Image, binary mask, class label and caption of item ``index``.

    The item's randomness derives from ``(spec.seed, index)`` only.
    """
    rng = RandomSource(spec.seed, index + 1).numpy()
    label = int(rng.integers(len(spec.classes)))
    kind = spec.classes[label]
    n = spec.image_size
    r_frac = float(rng.uniform(*spec.size_range))
    radius = r_frac * n
    margin = radius * (math.sqrt(spec.spatial_rank) if kind in ("square", "cube") else 1.0) + 1
    margin = min(margin, n / 2)
    center = [float(rng.uniform(margin, n - margin)) for _ in range(spec.spatial_rank)]
    angle = float(rng.uniform(0, math.pi / 2)) if kind in ("square", "cross") else 0.0
    intensity = float(rng.uniform(*spec.intensity_range))
    cov = _coverage(spec, kind, center, radius, angle)
    image = np.clip(intensity * cov, 0.0, 1.0).astype(np.float32)
    mask = (cov >= 0.5).astype(np.float32)
    return image, mask, label, _caption(spec, kind, intensity, r_frac, center, rng)


def render_shapeworld(spec: ShapeWorldSpec, n: int, start: int = 0):
    """In-memory dataset: ``(images (n,1,*S), masks (n,1,*S), labels, captions)``."""
    if n < 1:
        raise RangeError("n must be >= 1")
    items = [render_item(spec, start + i) for i in range(n)]
    images = torch.from_numpy(np.stack([it[0] for it in items]))[:, None]
    masks = torch.from_numpy(np.stack([it[1] for it in items]))[:, None]
    return images, masks, [it[2] for it in items], [it[3] for it in items]


@dataclass
class ManifestItem:
    image: str
    caption: Optional[str] = None
    paired: Optional[str] = None
    split: str = "train"
    label: Optional[int] = None


@dataclass
class DatasetManifest:
    items: List[ManifestItem]
    format: str = "png_2d"
    root: str = "."
    metadata: dict = field(default_factory=dict)

    def validate(self, check_paths: bool = True) -> "DatasetManifest":
        if self.format not in FORMATS:
            raise ConfigError(f"unknown format {self.format!r}")
        seen: Dict[str, str] = {}
        for it in self.items:
            if it.split not in SPLITS:
                raise ConfigError(f"unknown split {it.split!r}")
            if seen.setdefault(it.image, it.split) != it.split:
                raise ConfigError(f"{it.image} appears in more than one split")
            if check_paths:
                for p in (it.image, it.paired):
                    if p is not None and not (Path(self.root) / p).exists():
                        raise ConfigError(f"missing file {p}")
        return self

    def to_dict(self) -> dict:
        return {"format": self.format, "metadata": self.metadata, "items": [asdict(i) for i in self.items]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        items = [ManifestItem(**it) for it in raw["items"]]
        return cls(items, raw.get("format", "png_2d"), str(Path(path).parent), raw.get("metadata", {})).validate()

    def select(self, split: Optional[str] = None) -> List[ManifestItem]:
        return [it for it in self.items if split is None or it.split == split]

    def load_split(self, split: Optional[str] = None):
        """``(images, captions, paired_or_None, labels)`` for one split."""
        items = self.select(split)
        if not items:
            raise ConfigError(f"split {split!r} is empty")
        root = Path(self.root)
        images = torch.from_numpy(np.stack([read_array(root / it.image, self.format) for it in items]))[:, None]
        paired = None
        if all(it.paired for it in items):
            paired = torch.from_numpy(np.stack([read_array(root / it.paired, self.format) for it in items]))[:, None]
        return images.float(), [it.caption or "" for it in items], paired, [it.label for it in items]


def split_tags(n: int, test_fraction: float, seed: int) -> List[str]:
    n_test = int(round(test_fraction * n))
    test = set(RandomSource(seed, 0).numpy().permutation(n)[:n_test].tolist())
    return ["test" if i in test else "train" for i in range(n)]


def generate_shapeworld(spec: ShapeWorldSpec, n: int, out_dir) -> DatasetManifest:
    """Render ``n`` items to ``out_dir`` (images, masks as paired images, ``manifest.json``)."""
    if n < 1:
        raise RangeError("n must be >= 1")
    fmt = "png_2d" if spec.spatial_rank == 2 else "nifti_3d"
    ext = FORMATS[fmt][0]
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    tags = split_tags(n, spec.test_fraction, spec.seed)
    items = []
    for i in range(n):
        image, mask, label, caption = render_item(spec, i)
        img_rel, mask_rel = f"images/{i:05d}{ext}", f"masks/{i:05d}{ext}"
        write_array(out / img_rel, image, fmt)
        write_array(out / mask_rel, mask, fmt)
        items.append(ManifestItem(img_rel, caption, mask_rel, tags[i], label))
    spec_meta = asdict(spec)
    manifest = DatasetManifest(items, fmt, str(out), {"generator": "shapeworld", "spec": spec_meta, "n": n})
    manifest.save(out / "manifest.json")
    return manifest
