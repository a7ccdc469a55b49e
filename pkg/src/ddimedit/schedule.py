"""Noise schedules and accelerated timestep grids.

Notation: ``alpha = 1 - beta`` per step and ``alpha_bar[t]`` is the running
product over steps ``1..t`` (so ``alpha_bar[0] == 1``).  Some texts write the
cumulative product as plain ``alpha_t``; here it is always ``alpha_bar``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Schedule",
    "TimestepGrid",
    "ScheduleError",
    "make_linear_schedule",
    "schedule_from_betas",
    "alpha_bar_at",
    "make_grid",
]


class ScheduleError(ValueError):
    """Invalid schedule parameters, timestep index, or grid request."""


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    beta: np.ndarray  # beta[t - 1] is the variance of step t
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    beta_start: float
    beta_end: float

    def beta_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        return alpha_bar_at(self, t)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Schedule)
            and self.T == other.T
            and np.array_equal(self.beta, other.beta)
            and np.array_equal(self.alpha_bar, other.alpha_bar)
        )


def schedule_from_betas(beta, beta_start: float | None = None, beta_end: float | None = None) -> Schedule:
    beta = np.array(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ScheduleError("beta must be a non-empty 1-D sequence")
    if not np.all((beta > 0) & (beta < 1)):
        raise ScheduleError("every beta must lie strictly inside (0, 1)")
    alpha_bar = np.empty(beta.size + 1)
    alpha_bar[0] = 1.0
    running = 1.0
    for i, b in enumerate(beta, start=1):
        running *= 1.0 - b
        alpha_bar[i] = running
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return Schedule(
        T=int(beta.size),
        beta=beta,
        alpha_bar=alpha_bar,
        beta_start=float(beta[0] if beta_start is None else beta_start),
        beta_end=float(beta[-1] if beta_end is None else beta_end),
    )


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Linearly spaced betas from ``beta_start`` (step 1) to ``beta_end`` (step T)."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, int(T)) if T > 1 else np.array([beta_start])
    return schedule_from_betas(beta, beta_start, beta_end)


def alpha_bar_at(s: Schedule, t: int) -> float:
    if not 0 <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside 0..{s.T}")
    return float(s.alpha_bar[t])


@dataclass(frozen=True)
class TimestepGrid:
    taus: tuple[int, ...]

    @property
    def S(self) -> int:
        return len(self.taus)

    @property
    def t0(self) -> int:
        return self.taus[-1]

    def hops(self) -> list[tuple[int, int]]:
        """Consecutive (lower, upper) pairs in increasing order."""
        return list(zip(self.taus[:-1], self.taus[1:]))


def make_grid(t0: int, S: int, T: int | None = None) -> TimestepGrid:
    """``S`` integer timesteps from 0 to ``t0``, evenly spaced, rounded half up."""
    if t0 < 1 or (T is not None and t0 > T):
        raise ScheduleError(f"return step t0={t0} outside 1..{T if T is not None else 'T'}")
    if S < 2:
        raise ScheduleError(f"grid needs at least 2 points, got S={S}")
    if S > t0 + 1:
        raise ScheduleError(f"infeasible grid: S={S} exceeds t0 + 1 = {t0 + 1}")
    taus = np.floor(np.linspace(0.0, float(t0), S) + 0.5).astype(int)
    taus[0], taus[-1] = 0, t0
    taus = np.unique(taus)
    if taus.size != S:
        raise ScheduleError(f"rounding produced duplicate timesteps for t0={t0}, S={S}")
    return TimestepGrid(tuple(int(t) for t in taus))
