"""Config-driven training entry points.

Each run writes ``<name>.pt`` (checkpoint), ``<name>_loss.csv`` (step, name,
value) and ``<name>.cfg`` (the resolved config) into ``run.output_dir``.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import torch

from ..estimators import CompressionModel, ControlNetTranslator, DiffusionUpscaler, LatentDiffusion, LatentTransformer
from ..foundation import ConfigError, IncompatibleCheckpoint
from .config import TrainingConfig
from .data import DatasetManifest

log = logging.getLogger(__name__)

_ESTIMATORS = {"kl": CompressionModel, "vq": CompressionModel, "diffusion": LatentDiffusion,
               "transformer": LatentTransformer, "controlnet": ControlNetTranslator, "upscaler": DiffusionUpscaler}


def write_loss_csv(path, history: Sequence[Tuple[int, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "name", "value"])
        for step, name, value in history:
            w.writerow([step, name, repr(float(value))])


def build_estimator(cfg: TrainingConfig, n_items: int, upstream=None):
    cls = _ESTIMATORS[cfg.kind]
    valid = set(cls().get_params(deep=False))
    model = dict(cfg.model)
    bad = set(model) - valid
    if bad:
        raise ConfigError(f"unknown model keys for {cfg.kind}: {sorted(bad)}")
    common = dict(optimizer=cfg.optimizer_kind(), lr=cfg.optimizer.lr, n_steps=cfg.num_steps(n_items),
                  batch_size=cfg.run.batch_size, seed=cfg.run.seed)
    sched = dict(profile=cfg.schedule.profile, T=cfg.schedule.T, beta_start=cfg.schedule.beta_start,
                 beta_end=cfg.schedule.beta_end, prediction_type=cfg.schedule.prediction_type)
    if cfg.kind in ("kl", "vq"):
        extra = dict(kind=cfg.kind, kl_weight=cfg.loss.kl_weight, perceptual_weight=cfg.loss.perceptual_weight,
                     adversarial_weight=cfg.loss.adversarial_weight, adversarial_start=cfg.loss.adversarial_start,
                     disc_lr=cfg.optimizer.disc_lr)
    elif cfg.kind == "diffusion":
        extra = dict(compression=upstream, cond_dropout_prob=cfg.loss.cond_dropout_prob,
                     weight_decay=cfg.optimizer.weight_decay, **sched)
    elif cfg.kind == "transformer":
        extra = dict(compression=upstream, weight_decay=cfg.optimizer.weight_decay)
    elif cfg.kind == "controlnet":
        extra = dict(diffusion=upstream)
    else:
        extra = dict(compression=upstream, **sched)
    return cls(**{**common, **extra, **model})


def _load_upstream(kind: str, path: Optional[str]):
    if kind in ("kl", "vq"):
        return None
    if kind == "controlnet":
        if path is None:
            raise ConfigError("train-controlnet needs a diffusion checkpoint")
        return LatentDiffusion.load(path)
    if path is None:
        if kind == "diffusion":
            return None
        raise ConfigError(f"{kind} training needs a compression checkpoint")
    comp = CompressionModel.load(path)
    if kind == "transformer" and comp.kind != "vq":
        raise IncompatibleCheckpoint("transformer training needs a VQ compression checkpoint")
    return comp


def train(cfg: TrainingConfig, upstream: Optional[str] = None, manifest: Optional[DatasetManifest] = None) -> Path:
    """Fit the estimator described by ``cfg`` and write its artefacts; returns the checkpoint path."""
    cfg.validate()
    up = _load_upstream(cfg.kind, upstream)
    if manifest is None:
        if not cfg.data.manifest:
            raise ConfigError("data.manifest is required")
        manifest = DatasetManifest.load(cfg.data.manifest)
    images, captions, paired, _ = manifest.load_split(cfg.data.split)
    est = build_estimator(cfg, len(images), up)
    torch.manual_seed(cfg.run.seed)
    if cfg.kind == "controlnet":
        if paired is None:
            raise ConfigError("controlnet training needs paired images in the manifest")
        est.fit(paired, images)
    elif cfg.kind == "diffusion" and cfg.data.captions:
        est.fit(images, captions)
    else:
        est.fit(images)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = cfg.run.name or cfg.kind
    ckpt = out / f"{name}.pt"
    est.save(ckpt, {"config_hash": cfg.hash, "seed": cfg.run.seed, "config": cfg.to_ini()})
    write_loss_csv(out / f"{name}_loss.csv", est.loss_history_)
    (out / f"{name}.cfg").write_text(cfg.to_ini())
    log.info("wrote %s", ckpt)
    return ckpt


def train_autoencoder(cfg: TrainingConfig, manifest=None) -> Path:
    if cfg.kind not in ("kl", "vq"):
        raise ConfigError("train_autoencoder needs model.kind = kl or vq")
    return train(cfg, None, manifest)


def train_diffusion(cfg: TrainingConfig, autoencoder: Optional[str] = None, manifest=None) -> Path:
    if cfg.kind not in ("diffusion", "upscaler"):
        raise ConfigError("train_diffusion needs model.kind = diffusion or upscaler")
    return train(cfg, autoencoder, manifest)


def train_transformer(cfg: TrainingConfig, vqvae: str, manifest=None) -> Path:
    if cfg.kind != "transformer":
        raise ConfigError("train_transformer needs model.kind = transformer")
    return train(cfg, vqvae, manifest)


def train_controlnet(cfg: TrainingConfig, diffusion: str, manifest=None) -> Path:
    if cfg.kind != "controlnet":
        raise ConfigError("train_controlnet needs model.kind = controlnet")
    return train(cfg, diffusion, manifest)


_LOADERS = {"compression": CompressionModel, "latent_diffusion": LatentDiffusion,
            "latent_transformer": LatentTransformer, "controlnet": ControlNetTranslator,
            "upscaler": DiffusionUpscaler}


def load_estimator(path):
    """Load any estimator checkpoint written by :func:`train`."""
    from ..networks.checkpoint import load_checkpoint

    _, meta = load_checkpoint(path)
    kind = meta.get("estimator")
    if kind not in _LOADERS:
        raise IncompatibleCheckpoint(f"{path}: unknown estimator {kind!r}")
    return _LOADERS[kind].load(path), meta
