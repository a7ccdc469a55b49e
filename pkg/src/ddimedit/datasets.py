"""Seeded toy datasets.

``gaussian2d``
    ``mu + s * N(0, I)`` in two dimensions.
``ring2d``
    Points at angle ``U[0, 2 pi)`` and radius ``r + sigma * z`` with ``z``
    standard normal truncated to ``[-3, 3]``.
``blobs-images-32``
    One isotropic Gaussian bump per image on a dark background:
    ``0.1 + 0.8 * exp(-|p - c|^2 / (2 w^2))`` with random centre ``c`` (kept
    a quarter of the size away from the border) and width ``w``.
``stripes-images-32``
    ``0.5 + 0.4 * sin(2 pi f (u cos a + v sin a) + phase)`` over unit
    coordinates ``u, v``, with random frequency, angle and phase.

Image datasets have shape (n, 1, size, size) with values in [0, 1]; ``size``
defaults to 32.
"""

from __future__ import annotations

import numpy as np

__all__ = ["toy_datasets", "DATASETS"]

DATASETS = ("gaussian2d", "ring2d", "blobs-images-32", "stripes-images-32")


def _gaussian2d(n, rng, mu=(1.0, 0.0), s=0.5):
    mu = np.asarray(mu, dtype=np.float64)
    return mu + s * rng.standard_normal((n, mu.size))


def _ring2d(n, rng, r=2.0, sigma=0.1):
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    radius = r + sigma * np.clip(rng.standard_normal(n), -3.0, 3.0)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def _grid(size):
    u = (np.arange(size) + 0.5) / size
    return np.meshgrid(u, u, indexing="xy")


def _blobs(n, rng, size=32):
    xx, yy = _grid(size)
    cx = rng.uniform(0.25, 0.75, n)[:, None, None]
    cy = rng.uniform(0.25, 0.75, n)[:, None, None]
    w = rng.uniform(0.08, 0.16, n)[:, None, None]
    img = 0.1 + 0.8 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * w**2))
    return img[:, None]


def _stripes(n, rng, size=32):
    xx, yy = _grid(size)
    freq = rng.uniform(1.5, 4.0, n)[:, None, None]
    angle = rng.uniform(0.0, np.pi, n)[:, None, None]
    phase = rng.uniform(0.0, 2.0 * np.pi, n)[:, None, None]
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    img = 0.5 + 0.4 * np.sin(2.0 * np.pi * freq * proj + phase)
    return img[:, None]


def toy_datasets(name: str, n: int, rng: np.random.Generator | int, **kwargs) -> np.ndarray:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    makers = {
        "gaussian2d": _gaussian2d,
        "ring2d": _ring2d,
        "blobs-images-32": _blobs,
        "stripes-images-32": _stripes,
    }
    if name not in makers:
        raise KeyError(f"unknown dataset {name!r}; choose from {list(makers)}")
    return makers[name](n, rng, **kwargs)
