"""Base training, latent precomputation and guided fine-tuning.

Two fine-tuning regimes are provided:

* :func:`finetune_full` regenerates each image from its cached latent with
  the model being tuned and back-propagates the objective through every
  reverse step, so the shared network receives one gradient contribution per
  step it was applied at.
* :func:`finetune_stepwise` takes an optimizer step at every reverse hop,
  scoring the clean-signal estimate ``f`` at that hop.  Only one network
  application is ever held on the graph.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import ParamStore, _x0_from_eps
from .guidance import EditRecipe, Embedder, finetune_objective, l_simple
from .sampler import _ddim_update, ddim_invert, ddim_step
from .schedule import Schedule, TimestepGrid, alpha_bar_at, make_grid

__all__ = [
    "LatentCache",
    "DivergenceError",
    "FingerprintMismatchError",
    "train_base",
    "precompute_latents",
    "finetune_full",
    "finetune_stepwise",
    "lr_at",
    "write_history_csv",
]

HISTORY_FIELDS = ("iteration", "directional", "identity", "total")
MAX_LOSS = 1e30


class DivergenceError(RuntimeError):
    """A loss or parameter became non-finite."""


class FingerprintMismatchError(ValueError):
    """A latent cache was built with a different model."""


def lr_at(iteration: int, base_lr: float, factor: float = 1.2, every: int = 50, mode: str = "multiplicative") -> float:
    """Learning rate after ``iteration`` updates.

    ``multiplicative``: ``base_lr * factor ** (iteration // every)``.
    ``additive``: ``base_lr * (1 + (factor - 1) * (iteration // every))``.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    k = iteration // every
    if mode == "multiplicative":
        return base_lr * factor**k
    if mode == "additive":
        return base_lr * (1.0 + (factor - 1.0) * k)
    raise ValueError(f"unknown ramp mode {mode!r}")


def _schedule_of(p, s: Schedule | None) -> Schedule:
    s = s if s is not None else getattr(p, "schedule", None)
    if s is None:
        raise ValueError("no schedule given and the model does not carry one")
    return s


def _check_finite(store: ParamStore) -> None:
    for name, t in store.params.items():
        if not np.all(np.isfinite(t.data)):
            raise DivergenceError(f"parameter {name!r} became non-finite")


def train_base(
    p: ParamStore,
    dataset: np.ndarray,
    s: Schedule,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
) -> ParamStore:
    """Adam on the noise-regression loss; returns a trained copy of ``p``.

    The per-step losses are stored in ``history`` of the returned store.  A
    non-finite loss, a loss above ``MAX_LOSS`` or a non-finite parameter
    raises :class:`DivergenceError`.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.shape[0] == 0:
        raise ValueError("dataset is empty")
    store = p.clone()
    store.schedule = s
    for _ in range(steps):
        batch = data[rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))]
        with ad.Graph() as g:
            loss = l_simple(store, batch, s, rng)
        value = loss.item()
        if not np.isfinite(value) or value > MAX_LOSS:
            raise DivergenceError(f"training loss became {value} at step {len(store.history)}")
        ad.adam_step(store, ad.backward(g, loss, store), lr)
        store.history.append(value)
        _check_finite(store)
    return store


@dataclass
class LatentCache:
    entries: list[tuple[np.ndarray, np.ndarray]]
    grid: TimestepGrid
    fingerprint: str

    def __len__(self) -> int:
        return len(self.entries)

    def verify(self, p) -> None:
        if p.fingerprint() != self.fingerprint:
            raise FingerprintMismatchError("latent cache was computed with a different model")


def precompute_latents(p, images: Sequence[np.ndarray], recipe: EditRecipe, s: Schedule | None = None) -> LatentCache:
    """Invert each image to the return step over the ``S_for`` grid."""
    s = _schedule_of(p, s)
    grid = make_grid(recipe.t0, recipe.S_for, s.T)
    entries = []
    for x0 in images:
        x0 = np.array(x0, dtype=np.float64)
        entries.append((x0, np.asarray(ddim_invert(p, x0, grid, s))))
    return LatentCache(entries, grid, p.fingerprint())


def _fresh_copy(p: ParamStore, s: Schedule) -> ParamStore:
    # fine-tuning starts its own optimizer; pretraining moments are dropped
    store = p.clone()
    store.schedule = s
    store.adam = ad.AdamState()
    store.history = []
    return store


def _lr(recipe: EditRecipe, it: int) -> float:
    return lr_at(it, recipe.lr, recipe.lr_factor, recipe.lr_every, recipe.lr_mode)


def _record(store: ParamStore, it: int, total: Tensor, direc: float, ident: float) -> None:
    value = total.item()
    if not np.isfinite(value):
        raise DivergenceError(f"fine-tuning loss became {value} at iteration {it}")
    store.history.append({"iteration": it, "directional": direc, "identity": ident, "total": value})


def finetune_full(
    p_base: ParamStore,
    cache: LatentCache,
    e: Embedder,
    recipe: EditRecipe,
    rng: np.random.Generator | None = None,
    s: Schedule | None = None,
    id_embedder: Embedder | None = None,
) -> ParamStore:
    """Fine-tune a copy of ``p_base``, back-propagating through the whole reverse chain.

    Latents are visited in cache order, one update per latent, ``K`` epochs.
    ``meta["peak_graph_nodes"]`` of the result holds the largest recorded graph.
    """
    s = _schedule_of(p_base, s)
    cache.verify(p_base)
    recipe.validate(s.T)
    store = _fresh_copy(p_base, s)
    grid = make_grid(recipe.t0, recipe.S_gen, s.T)
    hops = list(reversed(grid.hops()))
    peak = 0
    it = 0
    for _ in range(recipe.K):
        for x0, latent in cache.entries[: recipe.N]:
            with ad.Graph() as g:
                x = Tensor(latent)
                for lo, hi in hops:
                    x = ddim_step(store, x, hi, lo, s)
                total, direc, ident = finetune_objective(e, x, x0, recipe, id_embedder)
            peak = max(peak, len(g))
            _record(store, it, total, direc, ident)
            ad.adam_step(store, ad.backward(g, total, store), _lr(recipe, it))
            _check_finite(store)
            it += 1
    store.meta["peak_graph_nodes"] = peak
    return store


def finetune_stepwise(
    p_base: ParamStore,
    cache: LatentCache,
    e: Embedder,
    recipe: EditRecipe,
    rng: np.random.Generator | None = None,
    s: Schedule | None = None,
    id_embedder: Embedder | None = None,
) -> ParamStore:
    """Fine-tune with an optimizer step at every reverse hop.

    At each hop the objective scores the clean-signal estimate ``f`` and the
    next state is produced with the parameters from before the update.  The
    learning-rate ramp advances once per latent, as in :func:`finetune_full`;
    history rows are per update.
    """
    s = _schedule_of(p_base, s)
    cache.verify(p_base)
    recipe.validate(s.T)
    store = _fresh_copy(p_base, s)
    grid = make_grid(recipe.t0, recipe.S_gen, s.T)
    hops = list(reversed(grid.hops()))
    peak = 0
    it = 0
    visit = 0
    for _ in range(recipe.K):
        for x0, latent in cache.entries[: recipe.N]:
            x = latent
            lr = _lr(recipe, visit)
            visit += 1
            for lo, hi in hops:
                with ad.Graph() as g:
                    eps = store.predict_noise(Tensor(x), hi)
                    f = _x0_from_eps(Tensor(x), eps, alpha_bar_at(s, hi))
                    total, direc, ident = finetune_objective(e, f, x0, recipe, id_embedder)
                x = np.asarray(_ddim_update(f.data, eps.data, alpha_bar_at(s, lo)))
                peak = max(peak, len(g))
                _record(store, it, total, direc, ident)
                ad.adam_step(store, ad.backward(g, total, store), lr)
                _check_finite(store)
                it += 1
    store.meta["peak_graph_nodes"] = peak
    return store


def write_history_csv(path, history: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_FIELDS})
