"""INI training configuration with validation and a stable hash.

Sections: ``[model]``, ``[optimizer]``, ``[loss]``, ``[schedule]``, ``[data]``
and ``[run]``. Values in ``[model]`` are Python literals (``(32, 64)``,
``True``, ``0.25``) or bare strings. Every key is validated before training.
"""
from __future__ import annotations

import ast
import configparser
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, Optional, Tuple

from ..foundation import ConfigError
from ..metrics import config_hash

MODEL_KINDS = ("kl", "vq", "diffusion", "transformer", "controlnet", "upscaler")


@dataclass
class OptimizerSection:
    kind: str = ""  # empty: adam for autoencoders, adamw otherwise
    lr: float = 1e-3
    disc_lr: float = 2e-3
    weight_decay: float = 0.0


@dataclass
class LossSection:
    kl_weight: float = 1e-8
    perceptual_weight: float = 0.002
    adversarial_weight: float = 0.005
    adversarial_start: int = 0
    cond_dropout_prob: float = 0.1


@dataclass
class ScheduleSection:
    profile: str = "scaled_linear"
    T: int = 1000
    beta_start: float = 0.0015
    beta_end: float = 0.0205
    prediction_type: str = "v_prediction"


@dataclass
class DataSection:
    manifest: str = ""
    split: str = "train"
    captions: bool = False
    use_paired: bool = False


@dataclass
class RunSection:
    steps: int = 0
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    output_dir: str = "runs"
    name: str = ""


@dataclass
class TrainingConfig:
    kind: str = "kl"
    model: Dict[str, object] = field(default_factory=dict)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    loss: LossSection = field(default_factory=LossSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "TrainingConfig":
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.optimizer.kind not in ("", "adam", "adamw"):
            raise ConfigError(f"optimizer.kind must be adam or adamw, got {self.optimizer.kind!r}")
        for name in ("lr", "disc_lr"):
            if not getattr(self.optimizer, name) > 0:
                raise ConfigError(f"optimizer.{name} must be > 0")
        if self.optimizer.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be >= 0")
        for name in ("kl_weight", "perceptual_weight", "adversarial_weight"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        if not 0 <= self.loss.cond_dropout_prob <= 1:
            raise ConfigError("loss.cond_dropout_prob must lie in [0, 1]")
        if self.schedule.profile not in ("linear", "scaled_linear", "cosine"):
            raise ConfigError(f"unknown schedule.profile {self.schedule.profile!r}")
        if self.schedule.prediction_type not in ("epsilon", "sample", "v_prediction"):
            raise ConfigError(f"unknown schedule.prediction_type {self.schedule.prediction_type!r}")
        if self.schedule.T < 1 or not 0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            raise ConfigError("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        if self.data.split not in ("train", "test"):
            raise ConfigError(f"unknown data.split {self.data.split!r}")
        if self.run.batch_size < 1 or self.run.steps < 0 or self.run.epochs < 1:
            raise ConfigError("run needs batch_size >= 1, steps >= 0, epochs >= 1")
        return self

    def optimizer_kind(self) -> str:
        return self.optimizer.kind or ("adam" if self.kind in ("kl", "vq") else "adamw")

    def num_steps(self, n_items: int) -> int:
        if self.run.steps:
            return self.run.steps
        return self.run.epochs * max(1, -(-n_items // self.run.batch_size))

    def to_dict(self) -> dict:
        out = {"model": {"kind": self.kind, **{k: _dump(v) for k, v in self.model.items()}}}
        for name in ("optimizer", "loss", "schedule", "data", "run"):
            out[name] = asdict(getattr(self, name))
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def to_ini(self) -> str:
        lines = []
        for sec, vals in self.to_dict().items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in vals.items()]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_file(cls, path, overrides: Iterable[str] = ()) -> "TrainingConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise ConfigError(f"cannot read config file {path}")
        return cls.from_parser(cp, overrides)

    @classmethod
    def from_string(cls, text: str, overrides: Iterable[str] = ()) -> "TrainingConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        return cls.from_parser(cp, overrides)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, overrides: Iterable[str] = ()) -> "TrainingConfig":
        for item in overrides:
            key, sep, value = item.partition("=")
            sec, dot, name = key.strip().partition(".")
            if not sep or not dot or not name:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, name, value.strip())
        unknown = set(cp.sections()) - {"model", "optimizer", "loss", "schedule", "data", "run"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if cp.has_section("model"):
            model = {k: _parse_literal(v) for k, v in cp.items("model")}
            cfg.kind = str(model.pop("kind", cfg.kind))
            cfg.model = model
        for name, typ in (("optimizer", OptimizerSection), ("loss", LossSection), ("schedule", ScheduleSection),
                          ("data", DataSection), ("run", RunSection)):
            if cp.has_section(name):
                setattr(cfg, name, _typed_section(name, typ, dict(cp.items(name))))
        return cfg.validate()


def _dump(v):
    return list(v) if isinstance(v, tuple) else v


def _parse_literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _typed_section(name, typ, raw: Dict[str, str]):
    known = {f.name: f for f in fields(typ)}
    kw = {}
    for key, text in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        default = known[key].default
        try:
            if isinstance(default, bool):
                low = text.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                kw[key] = low in ("true", "1", "yes")
            elif isinstance(default, int):
                kw[key] = int(text)
            elif isinstance(default, float):
                kw[key] = float(text)
            else:
                kw[key] = text.strip()
        except ValueError as exc:
            raise ConfigError(f"invalid value for {name}.{key}: {text!r}") from exc
    return typ(**kw)
