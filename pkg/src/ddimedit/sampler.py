"""Forward and reverse diffusion traversals.

All deterministic paths share one update, ``sqrt(ab_to) * f + sqrt(1 - ab_to) * eps``,
where ``f`` is the clean-signal estimate at the source time.  Stepping *up* the
grid with it is the deterministic inversion; stepping *down* is DDIM
generation.  Inversion evaluates the model at the lower time of each hop and
generation at the upper time, which is the only source of round-trip error.

Functions accept numpy arrays or :class:`~ddimedit.autodiff.Tensor` inputs and
return the same kind, so the reverse chain can be recorded for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import _x0_from_eps
from .schedule import Schedule, ScheduleError, TimestepGrid, alpha_bar_at

__all__ = [
    "Trajectory",
    "CombinationWeights",
    "WeightSumError",
    "SigmaTooLargeError",
    "ddpm_forward_sample",
    "ddpm_reverse_step",
    "ddim_step",
    "generalized_step",
    "ddim_invert",
    "ddim_generate",
    "combined_reverse_step",
    "combined_generate",
]

WEIGHT_TOL = 1e-9


class WeightSumError(ValueError):
    """Combination weights are negative or do not sum to one."""


class SigmaTooLargeError(ValueError):
    pass


@dataclass
class Trajectory:
    states: list[tuple[int, np.ndarray]] = field(default_factory=list)
    noises: list[np.ndarray] = field(default_factory=list)

    def append(self, t: int, x) -> None:
        self.states.append((t, np.array(x.data if isinstance(x, Tensor) else x, copy=True)))

    @property
    def timesteps(self) -> list[int]:
        return [t for t, _ in self.states]


def _check_t(t: int, s: Schedule, lo: int = 1) -> None:
    if not lo <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside {lo}..{s.T}")


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def ddpm_forward_sample(x0, t: int, s: Schedule, rng: np.random.Generator, noise=None):
    """Closed-form draw ``sqrt(ab_t) x0 + sqrt(1 - ab_t) w`` with ``w ~ N(0, I)``."""
    _check_t(t, s)
    ab = alpha_bar_at(s, t)
    x0 = np.asarray(x0, dtype=np.float64)
    w = rng.standard_normal(x0.shape) if noise is None else np.asarray(noise)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * w


def ddpm_reverse_step(
    p,
    x_t,
    t: int,
    s: Schedule,
    rng: np.random.Generator,
    variance: str = "beta",
    sigma: float | None = None,
):
    """One ancestral step ``t -> t - 1``.

    ``variance`` selects ``sigma_t^2 = beta_t`` ("beta") or the posterior
    variance ("posterior"); an explicit ``sigma`` overrides both.  No noise is
    added on the final step.
    """
    _check_t(t, s)
    beta = s.beta_at(t)
    ab = alpha_bar_at(s, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = p.predict_noise(x_t, t)
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if sigma is None:
        if variance == "beta":
            sigma = np.sqrt(beta)
        elif variance == "posterior":
            sigma = np.sqrt(beta * (1.0 - alpha_bar_at(s, t - 1)) / (1.0 - ab))
        else:
            raise ValueError(f"unknown variance mode {variance!r}")
    if sigma == 0:
        return mean
    return mean + sigma * rng.standard_normal(x_t.shape)


def _ddim_update(f, eps, ab_to: float):
    if _is_tensor(f, eps):
        return ad.add(ad.mul(f, np.sqrt(ab_to)), ad.mul(eps, np.sqrt(1.0 - ab_to)))
    return np.sqrt(ab_to) * f + np.sqrt(1.0 - ab_to) * eps


def ddim_step(p, x, t_from: int, t_to: int, s: Schedule):
    """Deterministic hop ``t_from -> t_to`` in either direction."""
    ab_from = alpha_bar_at(s, t_from)
    ab_to = alpha_bar_at(s, t_to)
    eps = p.predict_noise(x, t_from)
    f = _x0_from_eps(x, eps, ab_from)
    return _ddim_update(f, eps, ab_to)


def generalized_step(
    p,
    x_t,
    t_from: int,
    t_to: int,
    s: Schedule,
    sigma: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """``x_to = sqrt(ab_to) f + sqrt(1 - ab_to - sigma^2) eps + sigma z``."""
    if not 0 <= t_to < t_from <= s.T:
        raise ScheduleError(f"need 0 <= t_to < t_from <= {s.T}, got {t_from} -> {t_to}")
    if sigma < 0:
        raise SigmaTooLargeError("sigma must be non-negative")
    if sigma == 0:
        return ddim_step(p, x_t, t_from, t_to, s)
    ab_to = alpha_bar_at(s, t_to)
    if sigma**2 > 1.0 - ab_to:
        raise SigmaTooLargeError(f"sigma^2={sigma**2:.3g} exceeds 1 - alpha_bar={1 - ab_to:.3g}")
    if rng is None:
        raise ValueError("a random generator is required when sigma > 0")
    ab_from = alpha_bar_at(s, t_from)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = p.predict_noise(x_t, t_from)
    f = _x0_from_eps(x_t, eps, ab_from)
    z = rng.standard_normal(x_t.shape)
    return np.sqrt(ab_to) * f + np.sqrt(1.0 - ab_to - sigma**2) * eps + sigma * z


def ddim_invert(p, x0, grid: TimestepGrid, s: Schedule, trajectory: Trajectory | None = None):
    """Deterministic forward traversal of ``grid`` from 0 to its return step."""
    x = x0
    if trajectory is not None:
        trajectory.append(grid.taus[0], x)
    for lo, hi in grid.hops():
        x = ddim_step(p, x, lo, hi, s)
        if trajectory is not None:
            trajectory.append(hi, x)
    return x


def ddim_generate(p, latent, grid: TimestepGrid, s: Schedule, trajectory: Trajectory | None = None):
    """Deterministic reverse traversal of ``grid`` from its return step to 0."""
    x = latent
    if trajectory is not None:
        trajectory.append(grid.taus[-1], x)
    for lo, hi in reversed(grid.hops()):
        x = ddim_step(p, x, hi, lo, s)
        if trajectory is not None:
            trajectory.append(lo, x)
    return x


class CombinationWeights:
    """Per-model mixing weights ``gamma_i(t)``, non-negative and summing to one.

    Built either from one constant vector or from a table keyed by timestep.
    """

    def __init__(self, constant: Sequence[float] | None = None, table: dict[int, Sequence[float]] | None = None):
        if (constant is None) == (table is None):
            raise ValueError("give exactly one of constant or table")
        self.constant = None if constant is None else self._check(constant)
        self.table = None if table is None else {int(t): self._check(v) for t, v in table.items()}

    @staticmethod
    def _check(values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise WeightSumError("weights must be a non-empty vector")
        if np.any(v < 0):
            raise WeightSumError(f"negative weight in {v}")
        if abs(v.sum() - 1.0) > WEIGHT_TOL:
            raise WeightSumError(f"weights sum to {v.sum()!r}, not 1")
        return v

    @classmethod
    def per_step(cls, grid: TimestepGrid, rows: Sequence[Sequence[float]]) -> "CombinationWeights":
        """One weight vector per reverse hop, ordered from ``t0`` downward."""
        sources = list(reversed(grid.taus[1:]))
        if len(rows) != len(sources):
            raise ValueError(f"need {len(sources)} weight rows, got {len(rows)}")
        return cls(table=dict(zip(sources, rows)))

    @property
    def M(self) -> int:
        if self.constant is not None:
            return self.constant.size
        return next(iter(self.table.values())).size

    def at(self, t: int) -> np.ndarray:
        if self.constant is not None:
            return self.constant
        if t not in self.table:
            raise KeyError(f"no combination weights defined at t={t}")
        return self.table[t]


def _weighted_sum(weights, values):
    total = None
    for w, v in zip(weights, values):
        term = v if w == 1.0 else w * v
        total = term if total is None else total + term
    return total


def combined_reverse_step(models: Sequence, w: CombinationWeights, x_t, t_from: int, t_to: int, s: Schedule):
    """Deterministic step using convex mixtures of each model's ``f`` and ``eps``.

    Models with zero weight are not evaluated.
    """
    if not models:
        raise ValueError("at least one model is required")
    gammas = CombinationWeights._check(w.at(t_from))
    if gammas.size != len(models):
        raise WeightSumError(f"{gammas.size} weights for {len(models)} models")
    if not 0 <= t_to < t_from <= s.T:
        raise ScheduleError(f"need 0 <= t_to < t_from <= {s.T}, got {t_from} -> {t_to}")
    ab_from = alpha_bar_at(s, t_from)
    active = [(g, m) for g, m in zip(gammas, models) if g != 0.0]
    eps_list = [m.predict_noise(x_t, t_from) for _, m in active]
    f_list = [_x0_from_eps(x_t, e, ab_from) for e in eps_list]
    g = [float(gm) for gm, _ in active]
    f = _weighted_sum(g, f_list)
    eps = _weighted_sum(g, eps_list)
    return _ddim_update(f, eps, alpha_bar_at(s, t_to))


def combined_generate(models: Sequence, w: CombinationWeights, latent, grid: TimestepGrid, s: Schedule):
    x = latent
    for lo, hi in reversed(grid.hops()):
        x = combined_reverse_step(models, w, x, hi, lo, s)
    return x
