"""Generative-quality metrics: FID, MMD, MS-SSIM, PSNR, MAE, AUC, alignment."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist, pdist

from .foundation import (
    DegenerateFeatures,
    EmbedderMissing,
    EmptyInput,
    InputTooSmall,
    NotEnoughSamples,
    NumericalFailure,
    RandomSource,
    RangeError,
    ShapeMismatch,
    as_random_source,
    to_numpy,
)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MetricReport:
    name: str
    value: float
    n_samples: int
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    extractor_id: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        if isinstance(d["value"], float) and math.isinf(d["value"]):
            d["value"] = "inf" if d["value"] > 0 else "-inf"
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        d = json.loads(line)
        if isinstance(d["value"], str):
            d["value"] = float(d["value"])
        return cls(**d)


def write_reports(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path) -> List[MetricReport]:
    with open(path) as fh:
        return [MetricReport.from_json(line) for line in fh if line.strip()]


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _features(a) -> np.ndarray:
    f = np.asarray(to_numpy(a), dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.ndim != 2:
        raise DegenerateFeatures(f"features must be (N, F), got {f.shape}")
    return f


def _moments(f: np.ndarray):
    if f.shape[0] < 2:
        raise DegenerateFeatures("need at least 2 samples per feature set")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eig_tol: float = 1e-6) -> float:
    """Frechet distance between two Gaussians.

    ``tr sqrt(cov_a @ cov_b)`` is the sum of square roots of the eigenvalues of
    the product, which are real and non-negative for PSD inputs.
    """
    diff = mu_a - mu_b
    eig = np.linalg.eigvals(cov_a @ cov_b).real
    scale = max(1.0, float(np.abs(eig).max(initial=0.0)))
    if eig.min(initial=0.0) < -eig_tol * scale:
        raise NumericalFailure(f"covariance product has eigenvalue {eig.min():.3g}")
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid(a, b) -> float:
    fa, fb = _features(a), _features(b)
    if fa.shape[1] != fb.shape[1]:
        raise DegenerateFeatures(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    mu_a, cov_a = _moments(fa)
    mu_b, cov_b = _moments(fb)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def gaussian_kernel(bandwidth: float) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    def k(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * bandwidth**2))

    return k


def median_bandwidth(pooled: np.ndarray) -> float:
    d = pdist(pooled)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def mmd(a, b, kernel: Optional[Callable] = None, bandwidth: Optional[float] = None) -> float:
    """Unbiased squared MMD (diagonal terms excluded); may be negative.

    Default kernel is Gaussian with the median pairwise distance of the pooled
    sample as bandwidth.
    """
    fa, fb = _features(a), _features(b)
    m, n = fa.shape[0], fb.shape[0]
    if m < 2 or n < 2:
        raise DegenerateFeatures("mmd needs at least 2 samples per set")
    if kernel is None:
        h = bandwidth if bandwidth is not None else median_bandwidth(np.vstack([fa, fb]))
        kernel = gaussian_kernel(h)
    kaa, kbb, kab = kernel(fa, fa), kernel(fb, fb), kernel(fa, fb)
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def _gaussian_window(size: int, sigma: float, rank: int, channels: int, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    w = g
    for _ in range(rank - 1):
        w = w.unsqueeze(-1) * g
    return w.expand(channels, 1, *([size] * rank)).contiguous()


def _ssim_terms(x, y, window, data_range, k1, k2):
    rank = x.ndim - 2
    conv = F.conv2d if rank == 2 else F.conv3d
    c = x.shape[1]

    def filt(z):
        return conv(z, window, groups=c)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    dims = tuple(range(2, x.ndim))
    return (lum * cs_map).mean(dim=dims), cs_map.mean(dim=dims)


def feasible_scales(spatial_shape: Sequence[int], kernel_size: int, max_scales: int) -> int:
    smallest = min(spatial_shape)
    s = 0
    while s < max_scales and smallest >= kernel_size * 2**s:
        s += 1
    return s


def ms_ssim(
    x,
    y,
    data_range: float = 1.0,
    scale_weights: Sequence[float] = MS_SSIM_WEIGHTS,
    kernel_size: int = 11,
    kernel_sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    reduction: str = "mean",
):
    """Multi-scale SSIM for 2D or 3D batches ``(B, C, *spatial)``.

    When the images are too small for all scales the count shrinks to the
    largest feasible one and the remaining weights are renormalised. Negative
    contrast-structure terms are clamped at 0 before exponentiation, so values
    lie in [0, 1].
    """
    x = torch.as_tensor(to_numpy(x), dtype=torch.float64)
    y = torch.as_tensor(to_numpy(y), dtype=torch.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim not in (4, 5):
        raise ShapeMismatch("expected (B, C, H, W) or (B, C, D, H, W)")
    rank = x.ndim - 2
    scales = feasible_scales(x.shape[2:], kernel_size, len(scale_weights))
    if scales == 0:
        raise InputTooSmall(f"spatial dims {tuple(x.shape[2:])} smaller than window {kernel_size}")
    weights = torch.tensor(scale_weights[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    window = _gaussian_window(kernel_size, kernel_sigma, rank, x.shape[1], torch.float64)
    pool = F.avg_pool2d if rank == 2 else F.avg_pool3d
    values = []
    for i in range(scales):
        ssim_val, cs = _ssim_terms(x, y, window, data_range, k1, k2)
        values.append(ssim_val if i == scales - 1 else cs)
        if i < scales - 1:
            x, y = pool(x, 2), pool(y, 2)
    stack = torch.relu(torch.stack(values, dim=0))  # (scales, B, C)
    out = torch.prod(stack ** weights.view(-1, 1, 1), dim=0).mean(dim=1)
    if reduction == "none":
        return out.numpy()
    return float(out.mean())


def pairwise_diversity(samples, pair_count: int, rng=0, **ms_ssim_kwargs) -> float:
    """Mean MS-SSIM over ``pair_count`` distinct random pairs (lower = more diverse)."""
    s = torch.as_tensor(to_numpy(samples))
    n = s.shape[0]
    if n < 2:
        raise NotEnoughSamples("need at least 2 samples")
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    count = min(int(pair_count), len(all_pairs))
    if count < 1:
        raise RangeError("pair_count must be >= 1")
    gen = as_random_source(rng).numpy()
    chosen = gen.choice(len(all_pairs), size=count, replace=False)
    ia = [all_pairs[k][0] for k in chosen]
    ib = [all_pairs[k][1] for k in chosen]
    vals = ms_ssim(s[ia], s[ib], reduction="none", **ms_ssim_kwargs)
    return float(np.mean(vals))


def psnr(x, y, data_range: float = 1.0) -> float:
    a, b = np.asarray(to_numpy(x), np.float64), np.asarray(to_numpy(y), np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if data_range <= 0:
        raise RangeError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def mae(x, y) -> float:
    a, b = np.asarray(to_numpy(x), np.float64), np.asarray(to_numpy(y), np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def auc(scores_in, scores_out) -> float:
    """P(in-distribution score > out-of-distribution score), ties count 1/2."""
    a = np.asarray(to_numpy(scores_in), np.float64).ravel()
    b = np.asarray(to_numpy(scores_out), np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptyInput("both score sets must be nonempty")
    # rank-based Mann-Whitney U with average ranks for ties
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def alignment_score(image_embs, text_embs) -> float:
    """Mean of ``100 * max(0, cos)`` over paired embeddings."""
    if image_embs is None or text_embs is None:
        raise EmbedderMissing("alignment needs image and text embeddings from an external embedder")
    a = np.asarray(to_numpy(image_embs), np.float64)
    b = np.asarray(to_numpy(text_embs), np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    cos = (a * b).sum(1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
    return float(np.mean(100.0 * np.maximum(cos, 0.0)))
