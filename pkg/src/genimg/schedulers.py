"""Noise schedules and the DDPM / DDIM / PNDM reverse-process steps.

Timesteps are 1-based: ``t`` in ``1..T`` indexes ``alpha_bars[t - 1]`` and
``t = 0`` denotes the clean signal (``alpha_bar = 1``).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .foundation import (
    BufferUnderflow,
    RangeError,
    ShapeMismatch,
    TimestepOutOfRange,
    UnknownPredictionType,
)

PROFILES = ("linear", "scaled_linear", "cosine")
PREDICTION_TYPES = ("epsilon", "sample", "v_prediction")
SPACINGS = ("linspace", "leading", "trailing")

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    profile: str
    betas: np.ndarray
    beta_start: float
    beta_end: float
    prediction_type: str = "v_prediction"

    def __post_init__(self):
        if len(self.betas) != self.T:
            raise RangeError("len(betas) must equal T")
        if self.prediction_type not in PREDICTION_TYPES:
            raise UnknownPredictionType(self.prediction_type)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at integer ``t`` with the ``alpha_bar(0) = 1`` convention."""
        t = int(t)
        if t < 0 or t > self.T:
            raise TimestepOutOfRange(f"t={t} outside 0..{self.T}")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def metadata(self) -> dict:
        return {
            "profile": self.profile,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "prediction_type": self.prediction_type,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "NoiseSchedule":
        return build_schedule(
            meta["profile"],
            int(meta["T"]),
            float(meta["beta_start"]),
            float(meta["beta_end"]),
            prediction_type=meta.get("prediction_type", "v_prediction"),
        )

    def with_prediction_type(self, prediction_type: str) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.profile, self.betas, self.beta_start, self.beta_end, prediction_type)


def _cosine_betas(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    betas = [min(1.0 - f(i + 1) / f(i), max_beta) for i in range(T)]
    return np.asarray(betas, dtype=np.float64)


def build_schedule(
    profile: str = "scaled_linear",
    T: int = 1000,
    beta_start: float = 0.0015,
    beta_end: float = 0.0205,
    prediction_type: str = "v_prediction",
) -> NoiseSchedule:
    """Construct a noise schedule.

    ``linear`` spaces betas evenly; ``scaled_linear`` spaces their square roots
    evenly; ``cosine`` ignores the beta range and uses the squared-cosine
    alpha-bar curve (offset 0.008, betas clipped at 0.999).
    """
    T = int(T)
    if T < 1:
        raise RangeError("T must be >= 1")
    if profile not in PROFILES:
        raise RangeError(f"unknown profile {profile!r}")
    if profile != "cosine" and not (0.0 < beta_start <= beta_end < 1.0):
        raise RangeError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if profile == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif profile == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        betas = _cosine_betas(T)
    return NoiseSchedule(T, profile, betas, float(beta_start), float(beta_end), prediction_type)


def _coef(values: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Gather per-timestep coefficients broadcastable against ``like``."""
    table = torch.as_tensor(values, dtype=torch.float64)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.long()
        if idx.numel() != like.shape[0]:
            raise ShapeMismatch("timestep tensor must have one entry per batch element")
        out = table[idx]
        return out.reshape(-1, *([1] * (like.ndim - 1))).to(like.dtype)
    return torch.tensor(float(table[int(t)]), dtype=like.dtype)


def _check_t(t: Timestep, T: int, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < lo or int(t.max()) > T):
            raise TimestepOutOfRange(f"timesteps must lie in {lo}..{T}")
    elif int(t) < lo or int(t) > T:
        raise TimestepOutOfRange(f"t={t} outside {lo}..{T}")


def _padded_alpha_bars(schedule: NoiseSchedule) -> np.ndarray:
    return np.concatenate([[1.0], schedule.alpha_bars])


def add_noise(x0: torch.Tensor, noise: torch.Tensor, t: Timestep, schedule: NoiseSchedule) -> torch.Tensor:
    if x0.shape != noise.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    _check_t(t, schedule.T)
    ab = _padded_alpha_bars(schedule)
    a = _coef(np.sqrt(ab), t, x0)
    s = _coef(np.sqrt(1.0 - ab), t, x0)
    return a * x0 + s * noise


def velocity(x0: torch.Tensor, noise: torch.Tensor, t: Timestep, schedule: NoiseSchedule) -> torch.Tensor:
    ab = _padded_alpha_bars(schedule)
    return _coef(np.sqrt(ab), t, x0) * noise - _coef(np.sqrt(1.0 - ab), t, x0) * x0


def training_target(x0, noise, t, schedule: NoiseSchedule, prediction_type: Optional[str] = None):
    kind = prediction_type or schedule.prediction_type
    if kind == "epsilon":
        return noise
    if kind == "sample":
        return x0
    if kind == "v_prediction":
        return velocity(x0, noise, t, schedule)
    raise UnknownPredictionType(kind)


def convert_prediction(
    model_out: torch.Tensor,
    prediction_type: str,
    x_t: torch.Tensor,
    t: Timestep,
    schedule: NoiseSchedule,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(pred_x0, pred_eps)`` from a raw network output."""
    if model_out.shape != x_t.shape:
        raise ShapeMismatch(f"model output {tuple(model_out.shape)} vs x_t {tuple(x_t.shape)}")
    _check_t(t, schedule.T, allow_zero=True)
    ab = _padded_alpha_bars(schedule)
    a = _coef(np.sqrt(ab), t, x_t)
    s = _coef(np.sqrt(1.0 - ab), t, x_t)
    if prediction_type == "epsilon":
        pred_eps = model_out
        pred_x0 = (x_t - s * pred_eps) / a
    elif prediction_type == "sample":
        pred_x0 = model_out
        pred_eps = (x_t - a * pred_x0) / s
    elif prediction_type == "v_prediction":
        pred_x0 = a * x_t - s * model_out
        pred_eps = a * model_out + s * x_t
    else:
        raise UnknownPredictionType(prediction_type)
    return pred_x0, pred_eps


def ddpm_step(
    model_out: torch.Tensor,
    t: int,
    x_t: torch.Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    t_prev: Optional[int] = None,
    clip_sample: Optional[float] = None,
) -> torch.Tensor:
    """Ancestral step from ``t`` to ``t_prev`` (default ``t - 1``).

    Uses the Gaussian posterior q(x_prev | x_t, x0) evaluated at the model's
    ``pred_x0``. The terminal step to ``t_prev = 0`` adds no noise.
    """
    t = int(t)
    t_prev = t - 1 if t_prev is None else int(t_prev)
    _check_t(t, schedule.T)
    if not 0 <= t_prev < t:
        raise TimestepOutOfRange(f"t_prev={t_prev} must lie in 0..{t - 1}")
    pred_x0, _ = convert_prediction(model_out, schedule.prediction_type, x_t, t, schedule)
    if clip_sample is not None:
        pred_x0 = pred_x0.clamp(-clip_sample, clip_sample)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    beta = 1.0 - ab_t / ab_prev
    coef_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    coef_xt = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_x0 * pred_x0 + coef_xt * x_t
    if t_prev == 0:
        return mean
    variance = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(variance) * noise


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


def ddim_step(
    model_out: torch.Tensor,
    t: int,
    t_prev: int,
    x_t: torch.Tensor,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
    clip_sample: Optional[float] = None,
) -> torch.Tensor:
    if not 0.0 <= eta <= 1.0:
        raise RangeError(f"eta must lie in [0, 1], got {eta}")
    t, t_prev = int(t), int(t_prev)
    _check_t(t, schedule.T)
    if not 0 <= t_prev < t:
        raise TimestepOutOfRange(f"t_prev={t_prev} must lie in 0..{t - 1}")
    pred_x0, pred_eps = convert_prediction(model_out, schedule.prediction_type, x_t, t, schedule)
    if clip_sample is not None:
        pred_x0 = pred_x0.clamp(-clip_sample, clip_sample)
    ab_prev = schedule.alpha_bar(t_prev)
    sigma = ddim_sigma(schedule, t, t_prev, eta) if eta > 0 else 0.0
    direction = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = math.sqrt(ab_prev) * pred_x0 + direction * pred_eps
    if sigma > 0:
        out = out + sigma * torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return out


PLMS_COEFFICIENTS = (55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0)


def plms_combine(eps_history: Sequence[torch.Tensor]) -> torch.Tensor:
    """Fourth-order linear multistep combination; newest estimate last."""
    if len(eps_history) < 4:
        raise BufferUnderflow(f"multistep needs 4 stored estimates, have {len(eps_history)}")
    e0, e1, e2, e3 = list(eps_history)[-4:]
    # (55 e3 - 59 e2 + 37 e1 - 9 e0) / 24 written in differences, so that an
    # identical history reduces to e3 without rounding
    return e3 + (31.0 * (e3 - e2) - 28.0 * (e2 - e1) + 9.0 * (e1 - e0)) / 24.0


def pndm_transfer(x_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic transfer of ``x_t`` to ``t_prev`` given a noise estimate."""
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    denom = math.sqrt(ab_t) * (math.sqrt((1.0 - ab_prev) * ab_t) + math.sqrt((1.0 - ab_t) * ab_prev))
    return math.sqrt(ab_prev / ab_t) * x_t - (ab_prev - ab_t) / denom * eps


def inference_timesteps(T: int, num_steps: int, spacing: str = "linspace") -> List[int]:
    """Decreasing integer timesteps in ``1..T`` used at inference.

    ``linspace`` (default) spans ``T`` down to 1, rounded down. ``leading``
    is ``1 + k * (T // n)``; ``trailing`` is ``T - k * (T // n)``.
    """
    if not 1 <= num_steps <= T:
        raise RangeError(f"num_steps must lie in 1..{T}")
    if spacing == "linspace":
        ts = np.floor(np.linspace(1, T, num_steps)).astype(int)
    elif spacing == "leading":
        ts = 1 + np.arange(num_steps) * (T // num_steps)
    elif spacing == "trailing":
        ts = T - np.arange(num_steps)[::-1] * (T // num_steps)
    else:
        raise RangeError(f"unknown spacing {spacing!r}")
    ts = sorted(set(int(v) for v in ts), reverse=True)
    return ts


@dataclass
class SamplerState:
    """Mutable per-trajectory state for multistep samplers."""

    timestep_sequence: List[int]
    eta: float = 0.0
    eps_history: Deque[torch.Tensor] = field(default_factory=lambda: deque(maxlen=4))
    counter: int = 0
    anchor: Optional[torch.Tensor] = None
    rk_eps: List[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise RangeError("eta must lie in [0, 1]")


def pndm_plan(timestep_sequence: Sequence[int], warmup_steps: int = 3) -> List[Tuple[str, int, int, int]]:
    """Model-evaluation plan: ``(kind, t_eval, t_from, t_to)`` per evaluation."""
    seq = list(timestep_sequence) + [0]
    plan = []
    for i in range(len(seq) - 1):
        t, t_next = seq[i], seq[i + 1]
        if i < warmup_steps:
            half = t - (t - t_next) // 2
            plan += [("rk1", t, t, t_next), ("rk2", half, t, t_next), ("rk3", half, t, t_next), ("rk4", t_next, t, t_next)]
        else:
            plan.append(("plms", t, t, t_next))
    return plan


def pndm_step(
    model_out: torch.Tensor,
    t: int,
    x_t: torch.Tensor,
    state: SamplerState,
    schedule: NoiseSchedule,
    warmup_steps: int = 3,
) -> Tuple[torch.Tensor, SamplerState]:
    """Consume one network evaluation and return the next evaluation point.

    The first ``warmup_steps`` intervals use the pseudo Runge-Kutta scheme
    (four evaluations each), after which a single-evaluation fourth-order
    linear multistep update is used. Deterministic.
    """
    plan = pndm_plan(state.timestep_sequence, warmup_steps)
    if state.counter >= len(plan):
        raise TimestepOutOfRange("sampler already finished")
    kind, t_eval, t_from, t_to = plan[state.counter]
    if int(t) != t_eval:
        raise TimestepOutOfRange(f"expected evaluation at t={t_eval}, got {t}")
    _, eps = convert_prediction(model_out, schedule.prediction_type, x_t, t_eval, schedule)
    half = t_from - (t_from - t_to) // 2
    if kind == "rk1":
        state.anchor = x_t
        state.rk_eps = [eps]
        state.eps_history.append(eps)
        x_next = pndm_transfer(x_t, eps, t_from, half, schedule)
    elif kind in ("rk2", "rk3"):
        state.rk_eps.append(eps)
        target = half if kind == "rk2" else t_to
        x_next = pndm_transfer(state.anchor, eps, t_from, target, schedule)
    elif kind == "rk4":
        e1, e2, e3 = state.rk_eps
        combined = (e1 + 2.0 * e2 + 2.0 * e3 + eps) / 6.0
        x_next = pndm_transfer(state.anchor, combined, t_from, t_to, schedule)
        state.anchor, state.rk_eps = None, []
    else:
        state.eps_history.append(eps)
        x_next = pndm_transfer(x_t, plms_combine(state.eps_history), t_from, t_to, schedule)
    state.counter += 1
    return x_next, state


class Sampler:
    """Iterates model evaluations of one reverse-process trajectory.

    Usage::

        for t in sampler.timesteps:
            x = sampler.step(net(x, t), t, x)
    """

    kind = "base"

    def __init__(self, schedule: NoiseSchedule, num_inference_steps: Optional[int] = None, spacing: str = "linspace"):
        self.schedule = schedule
        n = schedule.T if num_inference_steps is None else int(num_inference_steps)
        self.timestep_sequence = inference_timesteps(schedule.T, n, spacing)
        self._next = {t: (self.timestep_sequence[i + 1] if i + 1 < len(self.timestep_sequence) else 0)
                      for i, t in enumerate(self.timestep_sequence)}

    @property
    def timesteps(self) -> List[int]:
        return list(self.timestep_sequence)

    def step(self, model_out, t, x, generator=None):
        raise NotImplementedError


class DDPMSampler(Sampler):
    kind = "ddpm"

    def step(self, model_out, t, x, generator=None):
        return ddpm_step(model_out, t, x, self.schedule, generator, t_prev=self._next[int(t)])


class DDIMSampler(Sampler):
    kind = "ddim"

    def __init__(self, schedule, num_inference_steps=None, spacing="linspace", eta: float = 0.0):
        super().__init__(schedule, num_inference_steps, spacing)
        if not 0.0 <= eta <= 1.0:
            raise RangeError("eta must lie in [0, 1]")
        self.eta = eta

    def step(self, model_out, t, x, generator=None):
        return ddim_step(model_out, t, self._next[int(t)], x, self.schedule, self.eta, generator)


class PNDMSampler(Sampler):
    kind = "pndm"

    def __init__(self, schedule, num_inference_steps=None, spacing="linspace", warmup_steps: int = 3):
        super().__init__(schedule, num_inference_steps, spacing)
        self.warmup_steps = warmup_steps
        self.state = SamplerState(list(self.timestep_sequence))

    @property
    def timesteps(self) -> List[int]:
        return [p[1] for p in pndm_plan(self.timestep_sequence, self.warmup_steps)]

    def step(self, model_out, t, x, generator=None):
        x_next, self.state = pndm_step(model_out, t, x, self.state, self.schedule, self.warmup_steps)
        return x_next


def make_sampler(kind: str, schedule: NoiseSchedule, num_inference_steps: Optional[int] = None,
                 spacing: str = "linspace", eta: float = 0.0) -> Sampler:
    if kind == "ddpm":
        return DDPMSampler(schedule, num_inference_steps, spacing)
    if kind == "ddim":
        return DDIMSampler(schedule, num_inference_steps, spacing, eta)
    if kind == "pndm":
        return PNDMSampler(schedule, num_inference_steps, spacing)
    raise RangeError(f"unknown scheduler kind {kind!r}")
