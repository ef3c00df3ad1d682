"""Evaluation workflows: sample quality, reconstruction, paired tasks, guidance sweeps."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..estimators import CompressionModel, ControlNetTranslator, DiffusionUpscaler, LatentDiffusion, LatentTransformer
from ..foundation import ConfigError, check_images
from ..losses import get_extractor
from ..metrics import MetricReport, alignment_score, fid, mae, ms_ssim, pairwise_diversity, psnr
from ..text import HashTextEmbedder, tokenize

GUIDANCE_WEIGHTS = (1.0, 1.5, 1.75, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
EXTRACTOR_ID = "random_conv"


@torch.no_grad()
def image_features(x, extractor_id: str = EXTRACTOR_ID, chunk: int = 256) -> np.ndarray:
    """Pooled extractor features; 3D volumes use the three central orthogonal slices."""
    x = check_images(x).clamp(0, 1)
    net = get_extractor(extractor_id)
    if x.ndim == 5:
        return np.concatenate([image_features(x.select(a, x.shape[a] // 2), extractor_id) for a in (2, 3, 4)], 1)
    return torch.cat([net.pooled(x[i:i + chunk]) for i in range(0, len(x), chunk)]).double().numpy()


def feature_fid(a, b, extractor_id: str = EXTRACTOR_ID) -> float:
    return fid(image_features(a, extractor_id), image_features(b, extractor_id))


def _report(name, value, n, seed, chash, **extra) -> MetricReport:
    return MetricReport(name, float(value), int(n), seed, chash, EXTRACTOR_ID if "fid" in name else None, extra)


def reconstruction_reports(model: CompressionModel, images, seed=None, chash=None) -> List[MetricReport]:
    x = check_images(images)
    recon = model.reconstruct(x).clamp(0, 1)
    n = len(x)
    return [_report("recon_ms_ssim", ms_ssim(recon, x), n, seed, chash),
            _report("recon_psnr", psnr(recon, x), n, seed, chash),
            _report("recon_mae", mae(recon, x), n, seed, chash)]


def sample_quality_reports(samples, test_images, seed=None, chash=None, pair_count: int = 64,
                           prefix: str = "") -> List[MetricReport]:
    s = check_images(samples).clamp(0, 1)
    return [_report(prefix + "fid", feature_fid(s, test_images), len(s), seed, chash),
            _report(prefix + "diversity_ms_ssim", pairwise_diversity(s, pair_count, rng=seed or 0), len(s), seed,
                    chash)]


def paired_reports(pred, target, seed=None, chash=None, prefix: str = "") -> List[MetricReport]:
    p = check_images(pred).clamp(0, 1)
    t = check_images(target)
    n = len(t)
    return [_report(prefix + "ms_ssim", ms_ssim(p, t), n, seed, chash),
            _report(prefix + "psnr", psnr(p, t), n, seed, chash),
            _report(prefix + "mae", mae(p, t), n, seed, chash)]


def evaluate(estimator, test_images, test_captions: Optional[Sequence[str]] = None, paired=None,
             n_samples: int = 64, seed: int = 0, config_hash: Optional[str] = None,
             num_inference_steps: int = 50) -> List[MetricReport]:
    """Reports appropriate to the estimator type; every row carries ``config_hash`` and ``seed``."""
    x = check_images(test_images)
    reps: List[MetricReport] = []
    if isinstance(estimator, CompressionModel):
        return reconstruction_reports(estimator, x, seed, config_hash)
    if isinstance(estimator, LatentDiffusion):
        prompts = None
        if estimator.cross_attention_dim and test_captions:
            prompts = [test_captions[i % len(test_captions)] for i in range(n_samples)]
        s = estimator.sample(n_samples, prompts, seed=seed, num_inference_steps=num_inference_steps)
        reps += sample_quality_reports(s, x, seed, config_hash)
        if estimator.compression is not None:
            reps += reconstruction_reports(estimator.compression, x, seed, config_hash)
        return reps
    if isinstance(estimator, LatentTransformer):
        reps += sample_quality_reports(estimator.sample(n_samples, seed=seed), x, seed, config_hash)
        return reps + reconstruction_reports(estimator.compression, x, seed, config_hash)
    if isinstance(estimator, ControlNetTranslator):
        if paired is None:
            raise ConfigError("ControlNet evaluation needs paired conditioning images")
        pred = estimator.predict(paired, seed=seed, num_inference_steps=num_inference_steps)
        return paired_reports(pred, x, seed, config_hash)
    if isinstance(estimator, DiffusionUpscaler):
        pred = estimator.predict(estimator.downsample(x), seed=seed, num_inference_steps=num_inference_steps)
        return paired_reports(pred, x, seed, config_hash)
    raise ConfigError(f"cannot evaluate {type(estimator).__name__}")


class PrototypeAligner:
    """Image/text embedder pair for alignment scores on labelled synthetic data.

    Text: mean hash-word vector of the caption's class word. Image: softmax over
    distances to per-class feature prototypes, mixing the class-word vectors.
    A sample that looks like the prompted class scores close to 100.
    """

    def __init__(self, class_names: Sequence[str], temperature: float = 1.0, dim: int = 64, seed: int = 0):
        self.class_names = list(class_names)
        self.temperature = temperature
        self.words = HashTextEmbedder(dim, 1, seed)

    def fit(self, images, labels) -> "PrototypeAligner":
        f = image_features(images)
        self.mean_ = f.mean(0)
        self.std_ = f.std(0) + 1e-8
        z = (f - self.mean_) / self.std_
        lab = np.asarray(labels)
        self.prototypes_ = np.stack([z[lab == k].mean(0) for k in range(len(self.class_names))])
        self.class_vectors_ = np.stack([self.words.word_vector(c) for c in self.class_names])
        return self

    def image_embed(self, images) -> np.ndarray:
        z = (image_features(images) - self.mean_) / self.std_
        d2 = ((z[:, None, :] - self.prototypes_[None]) ** 2).mean(-1)
        logits = -d2 / self.temperature
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return p @ self.class_vectors_

    def text_embed(self, prompts: Sequence[str]) -> np.ndarray:
        rows = []
        for prompt in prompts:
            words = [w for w in tokenize(prompt) if w in self.class_names]
            if not words:
                rows.append(np.zeros(self.class_vectors_.shape[1]))
            else:
                rows.append(np.mean([self.words.word_vector(w) for w in words], axis=0))
        return np.asarray(rows)

    def score(self, images, prompts: Sequence[str]) -> float:
        return alignment_score(self.image_embed(images), self.text_embed(prompts))


def sweep_guidance(model: LatentDiffusion, prompts: Sequence[str], test_images, aligner: PrototypeAligner,
                   weights: Sequence[float] = GUIDANCE_WEIGHTS, seed: int = 0, num_inference_steps: int = 50,
                   config_hash: Optional[str] = None) -> List[Dict[str, float]]:
    """One ``{w, fid, alignment}`` row per guidance weight, same prompts and seed for every ``w``."""
    rows = []
    for w in weights:
        s = model.sample(len(prompts), list(prompts), guidance_scale=float(w), seed=seed,
                         num_inference_steps=num_inference_steps).clamp(0, 1)
        rows.append({"w": float(w), "fid": feature_fid(s, test_images), "alignment": aligner.score(s, prompts),
                     "n_samples": len(prompts), "seed": seed, "config_hash": config_hash})
    return rows
