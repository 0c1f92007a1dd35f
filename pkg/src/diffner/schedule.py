"""Diffusion-time mathematics for boundary noising and DDIM refinement.

All arrays are indexed by timestep with a sentinel at index 0, so ``alpha_bar[t]``
is the cumulative signal retention at step ``t`` and ``alpha_bar[0] == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError

SCHEDULE_KINDS = ("linear", "cosine")
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class VarianceSchedule:
    kind: str
    T: int
    beta: np.ndarray  # (T+1,), beta[0] = 0
    alpha: np.ndarray  # (T+1,), alpha[0] = 1
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)


@dataclass(frozen=True)
class TimestepPlan:
    gamma: int
    tau: tuple[int, ...]


def make_schedule(kind: str, T: int) -> VarianceSchedule:
    """Build a linear or cosine variance schedule over ``T`` steps.

    Linear: betas evenly spaced in ``[1e-4, 0.02]`` rescaled by ``1000 / T``.
    Cosine: ``alpha_bar(t) = f(t) / f(0)`` with
    ``f(t) = cos^2(((t / T + s) / (1 + s)) * pi / 2)`` and ``s = 0.008``.
    Betas are clipped to at most 0.999 in both cases.
    """
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T!r}")
    T = int(T)

    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    else:
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((steps / T + COSINE_OFFSET) / (1 + COSINE_OFFSET)) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = 1.0 - ab[1:] / ab[:-1]
    betas = np.clip(betas, 0.0, MAX_BETA)

    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return VarianceSchedule(kind=kind, T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, sched: VarianceSchedule, low: int = 1) -> int:
    if not isinstance(t, (int, np.integer)) or isinstance(t, bool):
        raise ValidationError(f"timestep must be an integer, got {t!r}")
    if not low <= t <= sched.T:
        raise ValidationError(f"timestep {t} outside [{low}, {sched.T}]")
    return int(t)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Sample ``x_t ~ q(x_t | x_0)`` in closed form with externally drawn noise."""
    t = _check_t(t, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValidationError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_update(x_cur: np.ndarray, x0_hat: np.ndarray, ab_cur: float, ab_prev: float) -> np.ndarray:
    """Deterministic DDIM move between two cumulative retentions.

    Recovers the implied noise from ``x_cur`` and the predicted clean signal, then
    re-noises the prediction at the earlier level ``ab_prev``.
    """
    if not ab_cur < 1.0:
        raise ValidationError(f"alpha_bar at the current step must be < 1, got {ab_cur}")
    x_cur = np.asarray(x_cur, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    eps_hat = (x_cur - math.sqrt(ab_cur) * x0_hat) / math.sqrt(1.0 - ab_cur)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step(
    x_cur: np.ndarray, x0_hat: np.ndarray, t_cur: int, t_prev: int, sched: VarianceSchedule
) -> np.ndarray:
    t_cur = _check_t(t_cur, sched)
    t_prev = _check_t(t_prev, sched, low=0)
    if t_prev >= t_cur:
        raise ValidationError(f"t_prev ({t_prev}) must be smaller than t_cur ({t_cur})")
    x_cur = np.asarray(x_cur, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x_cur.shape != x0_hat.shape:
        raise ValidationError(f"x_cur shape {x_cur.shape} does not match x0_hat shape {x0_hat.shape}")
    return ddim_update(x_cur, x0_hat, sched.alpha_bar[t_cur], sched.alpha_bar[t_prev])


def round_half_away(x):
    """Round to the nearest integer, ties away from zero (platform independent)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def make_tau(T: int, gamma: int) -> TimestepPlan:
    """Arithmetic subsequence of ``[1..T]`` with ``gamma`` entries ending at ``T``."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T!r}")
    if not isinstance(gamma, (int, np.integer)) or gamma < 1:
        raise ValidationError(f"gamma must be a positive integer, got {gamma!r}")
    if gamma > T:
        raise ValidationError(f"gamma ({gamma}) cannot exceed T ({T})")
    tau = [int(round_half_away(i * T / gamma)) for i in range(1, gamma + 1)]
    tau[-1] = T
    for i in range(gamma - 2, -1, -1):
        if tau[i] >= tau[i + 1]:
            tau[i] = tau[i + 1] - 1
    if tau[0] < 1:
        raise ValidationError(f"cannot build a strictly increasing plan for T={T}, gamma={gamma}")
    return TimestepPlan(gamma=int(gamma), tau=tuple(tau))
