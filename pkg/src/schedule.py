from __future__ import annotations

"""
Forward-diffusion noise schedule and the optimization-time annealing plan.

- NoiseSchedule: linear beta schedule and cumulative signal retention alpha_bar;
- AnnealingPlan: square-root timestep annealing and the annealed weight of
  the corrective-shape loss;
- forward_noise: z_t = sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps.

Timesteps are 1-based: alpha_bars[t - 1] holds the value for timestep t.
Everything here is pure and safe to call from any thread.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, RangeError, ShapeError


# -------------------------------------------------------------------
# Noise schedule
# -------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Variance schedule of the forward diffusion process.

    num_steps: number of diffusion timesteps T.
    betas: per-step variance increments, shape (T,).
    alpha_bars: cumulative products of (1 - beta), shape (T,).
    """

    num_steps: int
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @classmethod
    def linear(
        cls,
        num_steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 2e-2,
    ) -> "NoiseSchedule":
        """Standard DDPM schedule: betas spaced linearly from beta_start to beta_end."""
        if num_steps < 1:
            raise DomainError(f"num_steps must be >= 1, got {num_steps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise DomainError(
                f"Expected 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        alpha_bars = np.cumprod(1.0 - betas)
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        return cls(num_steps=num_steps, betas=betas, alpha_bars=alpha_bars)


def _check_timestep(schedule: NoiseSchedule, t: int) -> int:
    t_int = int(t)
    if t_int != t or not (1 <= t_int <= schedule.num_steps):
        raise RangeError(f"Timestep must be an integer in [1, {schedule.num_steps}], got {t}")
    return t_int


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    """Return alpha_bar_t for an integer timestep 1 <= t <= T."""
    t_int = _check_timestep(schedule, t)
    return float(schedule.alpha_bars[t_int - 1])


def forward_noise(
    z0: np.ndarray,
    t: int,
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Sample the forward process marginal q(z_t | z0) with the given noise."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 has shape {z0.shape} but eps has shape {eps.shape}")
    a = alpha_bar(schedule, t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


# -------------------------------------------------------------------
# Annealing plan
# -------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealingPlan:
    """
    Square-root timestep annealing and the linked CHS weight schedule.

    Defaults are the published constants: lambda 15000 -> 1000 while
    t anneals 600 -> 300.
    """

    i_max: int
    t_max: int = 600
    t_min: int = 300
    lambda_max_chs: float = 15000.0
    lambda_min_chs: float = 1000.0

    def __post_init__(self) -> None:
        if self.i_max < 1:
            raise DomainError(f"i_max must be >= 1, got {self.i_max}")
        if not (self.t_max > self.t_min >= 1):
            raise DomainError(
                f"Expected t_max > t_min >= 1, got t_max={self.t_max}, t_min={self.t_min}"
            )
        if not (self.lambda_max_chs >= self.lambda_min_chs >= 0.0):
            raise DomainError(
                "Expected lambda_max_chs >= lambda_min_chs >= 0, got "
                f"{self.lambda_max_chs}, {self.lambda_min_chs}"
            )

    def _progress(self, i: int) -> float:
        if not (0 <= i <= self.i_max):
            raise RangeError(f"Iteration must be in [0, {self.i_max}], got {i}")
        return math.sqrt(i / self.i_max)


def timestep_at_unrounded(plan: AnnealingPlan, i: int) -> float:
    """t(i) = t_max - (t_max - t_min) * sqrt(i / i_max), before rounding."""
    return plan.t_max - (plan.t_max - plan.t_min) * plan._progress(i)


def timestep_at(plan: AnnealingPlan, i: int) -> int:
    """Annealed timestep rounded half-up to the nearest integer."""
    return int(math.floor(timestep_at_unrounded(plan, i) + 0.5))


def lambda_chs_at_t(plan: AnnealingPlan, t: float) -> float:
    """
    Linear interpolation of the CHS weight between (t_min, lambda_min)
    and (t_max, lambda_max). Timesteps outside the interval are clamped.
    """
    t = min(max(float(t), float(plan.t_min)), float(plan.t_max))
    span = float(plan.t_max - plan.t_min)
    return (
        plan.lambda_max_chs * (t - plan.t_min) / span
        + plan.lambda_min_chs * (plan.t_max - t) / span
    )


def lambda_chs_at_iter(plan: AnnealingPlan, i: int) -> float:
    """lambda(i) = lambda_max - (lambda_max - lambda_min) * sqrt(i / i_max)."""
    return plan.lambda_max_chs - (plan.lambda_max_chs - plan.lambda_min_chs) * plan._progress(i)
