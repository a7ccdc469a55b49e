"""Editing procedures built on the deterministic sampler.

An :class:`EditSession` pairs a base model with fine-tuned models keyed by
their target anchor.  Every edit inverts with the base model and regenerates
with the edited one(s).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .guidance import EditRecipe
from .sampler import CombinationWeights, combined_generate, ddim_generate, ddim_invert, ddpm_forward_sample
from .schedule import Schedule, ScheduleError, make_grid

__all__ = [
    "EditSession",
    "MissingModelError",
    "manipulate",
    "project_to_domain",
    "translate_unseen",
    "multi_attribute",
    "continuous_transition",
    "round_trip",
]


class MissingModelError(KeyError):
    """No fine-tuned model is registered for the requested target."""


@dataclass(frozen=True)
class EditSession:
    base: object
    finetuned: Mapping[str, object] = field(default_factory=dict)
    schedule: Schedule | None = None
    seed: int = 0
    recipes: Mapping[str, EditRecipe] = field(default_factory=dict)

    def __post_init__(self):
        models = [self.base, *self.finetuned.values()]
        shapes = {tuple(m.data_shape) for m in models}
        if len(shapes) != 1:
            raise ValueError(f"models disagree on data shape: {sorted(shapes)}")
        sched = self.schedule if self.schedule is not None else getattr(self.base, "schedule", None)
        if sched is None:
            raise ValueError("session needs a schedule")
        for m in models:
            own = getattr(m, "schedule", None)
            if own is not None and own != sched:
                raise ValueError("all models in a session must share one schedule")
        object.__setattr__(self, "schedule", sched)

    def model(self, target) -> object:
        if not isinstance(target, str):
            return target
        if target not in self.finetuned:
            raise MissingModelError(f"no fine-tuned model for target {target!r}")
        return self.finetuned[target]

    def recipe(self, target: str) -> EditRecipe:
        return self.recipes.get(target, EditRecipe(y_tar=target))


def _grids(sess: EditSession, recipe: EditRecipe):
    T = sess.schedule.T
    return make_grid(recipe.t0, recipe.S_for, T), make_grid(recipe.t0, recipe.S_gen, T)


def _invert(sess, x0, recipe, latent=None):
    if latent is not None:
        return latent
    grid_for, _ = _grids(sess, recipe)
    return ddim_invert(sess.base, np.asarray(x0, dtype=np.float64), grid_for, sess.schedule)


def manipulate(sess: EditSession, x0, recipe: EditRecipe | str, latent=None) -> np.ndarray:
    """Invert with the base model, regenerate with the model fine-tuned for ``recipe.y_tar``."""
    if isinstance(recipe, str):
        recipe = sess.recipe(recipe)
    model = sess.model(recipe.y_tar)
    _, grid_gen = _grids(sess, recipe)
    return ddim_generate(model, _invert(sess, x0, recipe, latent), grid_gen, sess.schedule)


def project_to_domain(
    sess: EditSession,
    x0,
    k_ddpm: int = 3,
    t0: int | None = None,
    S_gen: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Repeat (stochastic jump to ``t0``, deterministic regeneration with the base model) ``k_ddpm`` times."""
    if k_ddpm < 1:
        raise ValueError(f"k_ddpm must be >= 1, got {k_ddpm}")
    s = sess.schedule
    default = EditRecipe()
    t0 = t0 if t0 is not None else min(default.t0, s.T // 2)
    S_gen = S_gen if S_gen is not None else min(default.S_gen, t0 + 1)
    grid = make_grid(t0, S_gen, s.T)
    rng = rng if rng is not None else np.random.default_rng(sess.seed)
    x = np.asarray(x0, dtype=np.float64)
    for _ in range(k_ddpm):
        x = ddpm_forward_sample(x, t0, s, rng)
        x = ddim_generate(sess.base, x, grid, s)
    return x


def translate_unseen(
    sess: EditSession,
    x0,
    k_ddpm: int = 3,
    recipe: EditRecipe | str | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pull ``x0`` toward the base model's domain, then :func:`manipulate` it."""
    if recipe is None:
        if len(sess.finetuned) != 1:
            raise ValueError("recipe is required when the session holds several models")
        recipe = next(iter(sess.finetuned))
    if isinstance(recipe, str):
        recipe = sess.recipe(recipe)
    recipe.validate(sess.schedule.T)
    projected = project_to_domain(sess, x0, k_ddpm, recipe.t0, recipe.S_gen, rng)
    return manipulate(sess, projected, recipe)


def multi_attribute(
    sess: EditSession,
    x0,
    models: Sequence,
    weights: CombinationWeights | Sequence[float],
    recipe: EditRecipe,
    latent=None,
) -> np.ndarray:
    """Invert with the base model; regenerate mixing several models' predictions."""
    resolved = [sess.model(m) for m in models]
    if not isinstance(weights, CombinationWeights):
        weights = CombinationWeights(constant=weights)
    _, grid_gen = _grids(sess, recipe)
    return combined_generate(resolved, weights, _invert(sess, x0, recipe, latent), grid_gen, sess.schedule)


def continuous_transition(sess: EditSession, x0, target, gamma: float, recipe: EditRecipe | None = None, latent=None) -> np.ndarray:
    """Blend base and edited predictions with weights ``(1 - gamma, gamma)``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if recipe is None:
        if not isinstance(target, str):
            raise ValueError("recipe is required when target is a model object")
        recipe = sess.recipe(target)
    model = sess.model(target)
    w = CombinationWeights(constant=[1.0 - gamma, gamma])
    _, grid_gen = _grids(sess, recipe)
    return combined_generate([sess.base, model], w, _invert(sess, x0, recipe, latent), grid_gen, sess.schedule)


def round_trip(p, x0, t0: int, S_for: int, S_gen: int, s: Schedule | None = None) -> np.ndarray:
    """Invert and regenerate with the same model."""
    s = s if s is not None else p.schedule
    if s is None:
        raise ScheduleError("no schedule available")
    latent = ddim_invert(p, np.asarray(x0, dtype=np.float64), make_grid(t0, S_for, s.T), s)
    return ddim_generate(p, latent, make_grid(t0, S_gen, s.T), s)
