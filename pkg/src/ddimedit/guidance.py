"""Embedders, embedding-space losses, and the fine-tuning objective.

An :class:`Embedder` maps data to vectors and names ("anchors") to vectors in
the same space.  Anchors play the role of text prompts: an edit is specified
by a reference anchor and a target anchor, and the directional loss asks that
the change in image embedding point the same way as the change between the
two anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict
from pathlib import Path
from types import SimpleNamespace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schedule import Schedule

__all__ = [
    "Embedder",
    "LinearProbe",
    "ChannelStats",
    "TrainedClassifier",
    "ScaledEmbedder",
    "EditRecipe",
    "DegenerateDirectionError",
    "ZeroEmbeddingError",
    "builtin_embedders",
    "global_loss",
    "directional_loss",
    "directional_terms",
    "identity_loss",
    "finetune_objective",
    "l_simple",
    "load_anchors",
    "save_anchors",
    "load_recipe",
    "save_recipe",
]

DEGENERATE_NORM = 1e-12
DEGENERATE_LOSS = 2.0


class DegenerateDirectionError(ValueError):
    """The image or anchor direction has (near) zero length."""


class ZeroEmbeddingError(ValueError):
    pass


class Embedder:
    """Base class; subclasses implement :meth:`embed_image`."""

    dim: int

    def __init__(self, anchors: Mapping[str, np.ndarray] | None = None):
        self.anchors: dict[str, np.ndarray] = {}
        for name, vec in (anchors or {}).items():
            self.add_anchor(name, vec)

    def embed_image(self, x) -> Tensor:
        raise NotImplementedError

    def embed_anchor(self, name: str) -> np.ndarray:
        try:
            return self.anchors[name]
        except KeyError:
            raise KeyError(f"unknown anchor {name!r}; known: {sorted(self.anchors)}") from None

    def add_anchor(self, name: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.dim:
            raise ValueError(f"anchor {name!r} has dim {vec.size}, embedder has {self.dim}")
        self.anchors[name] = vec


class LinearProbe(Embedder):
    """Fixed random linear map of the flattened data.

    Default anchors are embeddings of uniform images: ``dark`` (0.1),
    ``neutral`` (0.5) and ``bright`` (0.9).
    """

    def __init__(self, data_shape, dim: int = 16, seed: int = 0, anchors=None):
        self.data_shape = tuple(data_shape)
        self.dim = dim
        d = int(np.prod(self.data_shape))
        self.weight = np.random.default_rng(seed).standard_normal((d, dim)) / np.sqrt(d)
        super().__init__()
        for name, level in (("dark", 0.1), ("neutral", 0.5), ("bright", 0.9)):
            self.add_anchor(name, self.embed_image(np.full(self.data_shape, level)).data)
        for name, vec in (anchors or {}).items():
            self.add_anchor(name, vec)

    def embed_image(self, x) -> Tensor:
        x = ad._t(x)
        return ad.matmul(ad.reshape(x, (-1,)), self.weight)


class ChannelStats(Embedder):
    """Per-channel mean, variance and horizontal moment of a (C, H, W) image.

    The horizontal moment is the mean of the image weighted by a column ramp
    running from -1 (left) to +1 (right); it rises when content moves right
    and is unchanged by a uniform brightness offset.  Features are laid out
    as ``[means, variances, moments]``.
    """

    NEUTRAL = (0.5, 0.05, 0.0)
    ANCHOR_OFFSETS = {
        "neutral": (0.0, 0.0, 0.0),
        "bright": (0.5, 0.0, 0.0),
        "dark": (-0.5, 0.0, 0.0),
        "high-contrast": (0.0, 0.1, 0.0),
        "flat": (0.0, -0.05, 0.0),
        "shift-right": (0.0, 0.0, 0.1),
        "shift-left": (0.0, 0.0, -0.1),
    }

    def __init__(self, channels: int = 1, width: int | None = None, anchors=None):
        self.channels = channels
        self.dim = 3 * channels
        self.width = width
        super().__init__()
        for name, off in self.ANCHOR_OFFSETS.items():
            base = np.array(self.NEUTRAL) + np.array(off)
            self.add_anchor(name, np.repeat(base, channels))
        for name, vec in (anchors or {}).items():
            self.add_anchor(name, vec)

    def embed_image(self, x) -> Tensor:
        x = ad._t(x)
        if x.ndim != 3 or x.shape[0] != self.channels:
            raise ad.ShapeError(f"channel-stats expects ({self.channels}, H, W), got {x.shape}")
        c, h, w = x.shape
        flat = ad.reshape(x, (c, h * w))
        mean = ad.tmean(flat, axis=1, keepdims=True)
        centred = ad.sub(flat, mean)
        var = ad.tmean(ad.mul(centred, centred), axis=1)
        ramp = np.broadcast_to(np.linspace(-1.0, 1.0, w), (h, w)).reshape(1, h * w)
        moment = ad.tmean(ad.mul(flat, ramp), axis=1)
        return ad.concat([ad.reshape(mean, (c,)), var, moment], axis=0)


class TrainedClassifier(Embedder):
    """Penultimate features of a small MLP classifier.

    The classifier is trained at construction on labelled examples; each
    label becomes an anchor equal to the mean feature vector of its class.
    """

    def __init__(self, examples: Mapping[str, np.ndarray], hidden: int = 16, steps: int = 300, lr: float = 1e-2, seed: int = 0):
        names = sorted(examples)
        xs = [np.asarray(examples[n], dtype=np.float64) for n in names]
        self.data_shape = xs[0].shape[1:]
        d = int(np.prod(self.data_shape))
        self.dim = hidden
        rng = np.random.default_rng(seed)

        store = SimpleNamespace(adam=ad.AdamState())
        store.params = {
            "w1": Tensor(rng.uniform(-1, 1, (d, hidden)) / np.sqrt(d), requires_grad=True, name="w1"),
            "b1": Tensor(np.zeros(hidden), requires_grad=True, name="b1"),
            "w2": Tensor(rng.uniform(-1, 1, (hidden, len(names))) / np.sqrt(hidden), requires_grad=True, name="w2"),
            "b2": Tensor(np.zeros(len(names)), requires_grad=True, name="b2"),
        }
        self._params = store.params
        data = np.concatenate([x.reshape(len(x), -1) for x in xs])
        labels = np.concatenate([np.full(len(x), i) for i, x in enumerate(xs)])
        onehot = np.eye(len(names))[labels]
        self.history = []
        for _ in range(steps):
            with ad.Graph() as g:
                logits = ad.add(ad.matmul(self._features(data), store.params["w2"]), store.params["b2"])
                shifted = ad.sub(logits, logits.data.max(axis=1, keepdims=True))
                logz = ad.log(ad.tsum(ad.exp(shifted), axis=1))
                picked = ad.tsum(ad.mul(shifted, onehot), axis=1)
                loss = ad.tmean(ad.sub(logz, picked))
            ad.adam_step(store, ad.backward(g, loss, store.params), lr)
            self.history.append(loss.item())
        for t in self._params.values():
            t.requires_grad = False
        super().__init__()
        for i, name in enumerate(names):
            feats = self._features(data[labels == i]).data
            self.add_anchor(name, feats.mean(axis=0))

    def _features(self, flat) -> Tensor:
        p = self._params
        return ad.swish(ad.add(ad.matmul(flat, p["w1"]), p["b1"]))

    def embed_image(self, x) -> Tensor:
        x = ad._t(x)
        return self._features(ad.reshape(x, (-1,)))


class ScaledEmbedder(Embedder):
    """Wraps another embedder and multiplies its image embeddings by ``scale``."""

    def __init__(self, inner: Embedder, scale: float):
        self.inner = inner
        self.scale = scale
        self.dim = inner.dim
        super().__init__(inner.anchors)

    def embed_image(self, x) -> Tensor:
        return ad.mul(self.inner.embed_image(x), self.scale)


def builtin_embedders(name: str, **kwargs) -> Embedder:
    """``linear-probe``, ``channel-stats`` or ``trained-classifier``."""
    factories = {
        "linear-probe": LinearProbe,
        "channel-stats": ChannelStats,
        "trained-classifier": TrainedClassifier,
    }
    if name not in factories:
        raise KeyError(f"unknown embedder {name!r}; choose from {sorted(factories)}")
    return factories[name](**kwargs)


# -- losses ------------------------------------------------------------------


def _norm(v: Tensor) -> Tensor:
    return ad.sqrt(ad.tsum(ad.mul(v, v)))


def _cosine(a: Tensor, b) -> Tensor:
    b = ad._t(b)
    return ad.div(ad.tsum(ad.mul(a, b)), ad.mul(_norm(a), _norm(b)))


def global_loss(e: Embedder, x_gen, y_tar: str) -> Tensor:
    """Cosine distance between the image embedding and the target anchor."""
    emb = e.embed_image(x_gen)
    anchor = e.embed_anchor(y_tar)
    if np.linalg.norm(emb.data) == 0 or np.linalg.norm(anchor) == 0:
        raise ZeroEmbeddingError("cannot take the cosine of a zero embedding")
    return ad.sub(1.0, _cosine(emb, anchor))


def directional_terms(e: Embedder, x_gen, y_tar: str, x_ref, y_ref: str) -> tuple[Tensor, np.ndarray]:
    """(image direction, anchor direction), validated as non-degenerate."""
    dt = e.embed_anchor(y_tar) - e.embed_anchor(y_ref)
    if np.linalg.norm(dt) < DEGENERATE_NORM:
        raise DegenerateDirectionError(f"anchors {y_tar!r} and {y_ref!r} coincide")
    ref = e.embed_image(ad._t(x_ref).detach())
    di = ad.sub(e.embed_image(x_gen), ref.data)
    if np.linalg.norm(di.data) < DEGENERATE_NORM:
        raise DegenerateDirectionError("generated and reference images embed identically")
    return di, dt


def directional_loss(e: Embedder, x_gen, y_tar: str, x_ref, y_ref: str) -> Tensor:
    """``1 - cos(dI, dT)`` between image and anchor embedding changes."""
    di, dt = directional_terms(e, x_gen, y_tar, x_ref, y_ref)
    return ad.sub(1.0, _cosine(di, dt))


def identity_loss(x_hat, x0, lambda_l1: float, lambda_id: float = 0.0, id_embedder: Embedder | None = None) -> Tensor:
    """``lambda_l1 * mean|x0 - x_hat| + lambda_id * (1 - cos)`` of identity embeddings."""
    x_hat = ad._t(x_hat)
    x0 = ad._t(x0).detach()
    if x_hat.shape != x0.shape:
        raise ad.ShapeError(f"identity_loss: {x_hat.shape} vs {x0.shape}")
    total = ad.mul(ad.tmean(ad.absolute(ad.sub(x0, x_hat))), float(lambda_l1))
    if lambda_id and id_embedder is not None:
        cos = _cosine(id_embedder.embed_image(x_hat), id_embedder.embed_image(x0).data)
        total = ad.add(total, ad.mul(ad.sub(1.0, cos), float(lambda_id)))
    return total


@dataclass
class EditRecipe:
    y_ref: str = "neutral"
    y_tar: str = "bright"
    t0: int = 500
    S_for: int = 40
    S_gen: int = 6
    lambda_l1: float = 0.3
    lambda_id: float = 0.3  # only applied when an id embedder is supplied
    K: int = 1
    N: int = 50
    lr: float = 4e-6
    lr_factor: float = 1.2
    lr_every: int = 50
    lr_mode: str = "multiplicative"

    def validate(self, T: int | None = None) -> None:
        if self.t0 < 1 or (T is not None and self.t0 > T):
            raise ValueError(f"t0={self.t0} outside 1..{T}")
        if self.lambda_l1 < 0 or self.lambda_id < 0:
            raise ValueError("loss weights must be non-negative")
        if self.K < 0 or self.N < 1:
            raise ValueError("need K >= 0 and N >= 1")
        if self.lr_mode not in ("multiplicative", "additive"):
            raise ValueError(f"unknown lr_mode {self.lr_mode!r}")


def finetune_objective(e: Embedder, x_hat, x0, recipe: EditRecipe, id_embedder: Embedder | None = None) -> tuple[Tensor, float, float]:
    """Directional plus identity loss; returns (total, directional, identity).

    When the generated image embeds exactly like the source, the directional
    term is the constant 2.
    """
    try:
        direc = directional_loss(e, x_hat, recipe.y_tar, x0, recipe.y_ref)
    except DegenerateDirectionError:
        if np.linalg.norm(e.embed_anchor(recipe.y_tar) - e.embed_anchor(recipe.y_ref)) < DEGENERATE_NORM:
            raise
        direc = Tensor(DEGENERATE_LOSS)
    ident = identity_loss(x_hat, x0, recipe.lambda_l1, recipe.lambda_id, id_embedder)
    total = ad.add(direc, ident)
    return total, direc.item(), ident.item()


def l_simple(p, x0, s: Schedule, rng: np.random.Generator) -> Tensor:
    """Noise-regression loss ``||w - eps(sqrt(ab) x0 + sqrt(1 - ab) w, t)||^2``.

    ``x0`` is one sample or a batch; ``t ~ U{1..T}`` and ``w`` are drawn per
    sample and the squared norm is averaged over the batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batched = x0.shape != tuple(p.data_shape)
    xb = x0 if batched else x0[None]
    n = xb.shape[0]
    t = rng.integers(1, s.T + 1, size=n)
    w = rng.standard_normal(xb.shape)
    ab = s.alpha_bar[t].reshape((n,) + (1,) * (xb.ndim - 1))
    x_t = np.sqrt(ab) * xb + np.sqrt(1.0 - ab) * w
    eps = p.predict_noise(Tensor(x_t), t)
    diff = ad.sub(w, eps)
    per = ad.tsum(ad.reshape(ad.mul(diff, diff), (n, -1)), axis=1)
    return ad.tmean(per)


# -- text formats ------------------------------------------------------------


def load_anchors(path) -> dict[str, np.ndarray]:
    """Anchors file: one ``name v1 v2 ...`` per line; ``#`` starts a comment."""
    anchors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, *values = line.replace(",", " ", 1).split()
        if not values:
            raise ValueError(f"{path}:{lineno}: anchor {name!r} has no values")
        anchors[name] = np.array([float(v) for v in values])
    return anchors


def save_anchors(path, anchors: Mapping[str, np.ndarray]) -> None:
    lines = [name + " " + " ".join(repr(float(v)) for v in np.ravel(vec)) for name, vec in anchors.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_recipe(path) -> EditRecipe:
    """Recipe file: ``key=value`` lines using :class:`EditRecipe` field names."""
    types = {f.name: f.type for f in fields(EditRecipe)}
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown recipe key {key!r}")
        kind = types[key]
        values[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
    recipe = EditRecipe(**values)
    recipe.validate()
    return recipe


def save_recipe(path, recipe: EditRecipe) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in asdict(recipe).items()))
