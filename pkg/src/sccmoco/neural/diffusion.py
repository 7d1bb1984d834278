"""Binary discrete diffusion: symmetric flip kernels and their products."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[t]`` is the probability that a bit keeps its value at step ``t``.

    Stay probabilities fall linearly from ``beta_start`` at t=1 to
    ``beta_end`` at t=T, so the last kernel is fully uniform.
    """

    T: int = 1000
    alpha: float = 0.2
    beta_start: float = 1.0 - 1e-4
    beta_end: float = 0.5

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not 0.0 < self.alpha < 1.0 or self.alpha * self.T < 1:
            raise ValueError("alpha must lie in (0, 1) with alpha*T >= 1")
        for b in (self.beta_start, self.beta_end):
            if not 0.0 <= b <= 1.0:
                raise ValueError("stay probabilities must lie in [0, 1]")

    @cached_property
    def betas(self) -> np.ndarray:
        """Index 0 is unused; ``betas[t]`` for t = 1..T."""
        b = np.empty(self.T + 1)
        b[0] = 1.0
        b[1:] = np.linspace(self.beta_start, self.beta_end, self.T) if self.T > 1 else [self.beta_end]
        b.setflags(write=False)
        return b

    @cached_property
    def stay_bar(self) -> np.ndarray:
        """Closed-form probability that a bit equals its clean value after t steps."""
        s = 0.5 * (1.0 + np.cumprod(2.0 * self.betas - 1.0))
        s.setflags(write=False)
        return s

    @property
    def t_boundary(self) -> int:
        return int(self.alpha * self.T)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"time step must lie in [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha": self.alpha, "beta_start": self.beta_start, "beta_end": self.beta_end}


def q_step(schedule: NoiseSchedule, t: int) -> np.ndarray:
    b = schedule.betas[t]
    return np.array([[b, 1.0 - b], [1.0 - b, b]])


def qbar(schedule: NoiseSchedule, t: int) -> np.ndarray:
    schedule.check_t(t)
    s = schedule.stay_bar[t]
    return np.array([[s, 1.0 - s], [1.0 - s, s]])


def qbar_iterated(schedule: NoiseSchedule, t: int) -> np.ndarray:
    schedule.check_t(t)
    Q = np.eye(2)
    for s in range(1, t + 1):
        Q = Q @ q_step(schedule, s)
    return Q


def noise_sample(x0: np.ndarray, t, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw x_t given x_0; ``t`` is a scalar or one step per variable."""
    schedule.check_t(t)
    x0 = np.asarray(x0).astype(np.int8)
    keep = rng.random(x0.shape) < schedule.stay_bar[np.asarray(t)]
    return np.where(keep, x0, 1 - x0).astype(np.int8)


def noise_step(x: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One forward transition x_{t-1} -> x_t."""
    schedule.check_t(t)
    x = np.asarray(x).astype(np.int8)
    keep = rng.random(x.shape) < schedule.betas[t]
    return np.where(keep, x, 1 - x).astype(np.int8)


def cosine_steps(K: int, T: int) -> list[int]:
    """Start at T, then floor(cos((1 - n) pi / 2) T) for n = (K-1)/K, ..., 1/K."""
    if K < 1:
        raise ValueError("K must be at least 1")
    steps = [T]
    for k in range(1, K):
        n = (K - k) / K
        # the tolerance keeps exact products such as cos(pi/3) * 1000 from flooring one short
        steps.append(max(1, math.floor(math.cos((1.0 - n) * math.pi / 2.0) * T + 1e-9)))
    return steps


def sinusoidal_embedding(t, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
