"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations are recorded on the active :class:`Graph` whenever one of their
inputs requires gradients.  Recording order is a valid topological order, so
:func:`backward` simply walks the node list in reverse.

    >>> w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    >>> with Graph() as g:
    ...     loss = (w * w).sum()
    >>> backward(g, loss)["w"]
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonScalarLossError",
    "backward",
    "finite_diff",
    "adam_step",
    "precision",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "swish",
    "group_norm",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "gather",
]

_DTYPE = np.float64
_GRAPHS: list["Graph"] = []

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonScalarLossError(ValueError):
    """Raised when :func:`backward` is given a loss with more than one element."""


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the float dtype used for new tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of recorded operations; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _GRAPHS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPHS.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> dict[int, Tensor]:
        produced = {id(n.out) for n in self.nodes}
        found: dict[int, Tensor] = {}
        for n in self.nodes:
            for p in n.parents:
                if p.requires_grad and id(p) not in produced:
                    found[id(p)] = p
        return found


def _active() -> Graph | None:
    return _GRAPHS[-1] if _GRAPHS else None


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    graph = _active()
    if graph is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        graph.nodes.append(Node(op, out, parents, grad_fn))
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record("div", out, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and ``b`` of shape (k, m)."""
    a, b = _t(a), _t(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.data[None, :]
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), grad_fn)


# -- convolution -------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    # x (B, C, H, W) -> columns (C * k * k, B * H * W)
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, B, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i : i + H, j : j + W].transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * H * W)


def _conv_forward(x: np.ndarray, w: np.ndarray, pad: int, cols: np.ndarray | None = None) -> np.ndarray:
    # x (B, C, H, W), w (O, C, k, k) -> (B, O, H, W)
    B, _, H, W = x.shape
    O, k = w.shape[0], w.shape[-1]
    if cols is None:
        cols = _im2col(x, k, pad)
    out = w.reshape(O, -1) @ cols
    return np.ascontiguousarray(out.reshape(O, B, H, W).transpose(1, 0, 2, 3))


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 convolution with zero "same" padding (odd square kernels).

    ``x`` is (B, C, H, W) or (C, H, W); ``w`` is (O, C, k, k); ``b`` is (O,).
    """
    x, w = _t(x), _t(w)
    unbatched = x.ndim == 3
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be (O, C, k, k) with odd k, got {w.shape}")
    if x.ndim not in (3, 4) or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    xb = x.data[None] if unbatched else x.data
    k = w.shape[-1]
    pad = (k - 1) // 2
    cols = _im2col(xb, k, pad)
    out = _conv_forward(xb, w.data, pad, cols)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = _t(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    if unbatched:
        out = out[0]

    def grad_fn(g):
        gb4 = g[None] if unbatched else g
        w_flip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_forward(gb4, w_flip, pad)
        g2 = gb4.transpose(1, 0, 2, 3).reshape(gb4.shape[1], -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        grads = [gx[0] if unbatched else gx, gw]
        if b is not None:
            grads.append(gb4.sum(axis=(0, 2, 3)))
        return grads

    return _record("conv2d", out, parents, grad_fn)


# -- elementwise unary -------------------------------------------------------


def exp(x) -> Tensor:
    x = _t(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _t(x)
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _t(x)
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def absolute(x) -> Tensor:
    x = _t(x)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def swish(x) -> Tensor:
    x = _t(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _record("swish", out, (x,), lambda g: (g * (sig + out * (1.0 - sig)),))


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) of a (B, C, H, W) or (C, H, W) input."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    unbatched = x.ndim == 3
    xb = x.data[None] if unbatched else x.data
    if xb.ndim != 4:
        raise ShapeError(f"group_norm: expected (B, C, H, W), got {x.shape}")
    n, c, h, w = xb.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params {gamma.shape}/{beta.shape} vs {c} channels")
    xg = xb.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    if unbatched:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if unbatched else g
        ggamma = (gb * xhat).sum(axis=(0, 2, 3))
        gbeta = gb.sum(axis=(0, 2, 3))
        dxhat = (gb * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (
            dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        dx = dx.reshape(n, c, h, w)
        return (dx[0] if unbatched else dx), ggamma, gbeta

    return _record("group_norm", out, (x, gamma, beta), grad_fn)


# -- reductions and shape ----------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    return _record(
        "sum",
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand(np.asarray(g), x.shape, axis, keepdims).copy(),),
    )


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)
    return _record(
        "mean",
        out,
        (x,),
        lambda g: (_expand(np.asarray(g), x.shape, axis, keepdims) / count,),
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_t(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = _t(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def gather(table, index) -> Tensor:
    """Rows of ``table`` selected by integer timestep(s) ``index``."""
    table = _t(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather: index out of range for table with {table.shape[0]} rows")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("gather", table.data[idx], (table,), grad_fn)


# -- gradients ---------------------------------------------------------------


def _named(params) -> Mapping[str, Tensor]:
    if params is None:
        return {}
    if hasattr(params, "params"):
        return params.params
    return params


def backward(graph: Graph, loss: Tensor, params=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every named leaf.

    With ``params`` (a mapping of name to tensor, or a ParamStore) the result
    covers exactly those parameters, with zeros for any that do not reach the
    loss.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.data.dtype, copy=True)
    if params is not None:
        return {
            name: grads.get(id(tensor), np.zeros_like(tensor.data))
            for name, tensor in _named(params).items()
        }
    result: dict[str, np.ndarray] = {}
    for key, leaf in graph.leaves().items():
        if leaf.name is not None and leaf.name not in result:
            result[leaf.name] = grads.get(key, np.zeros_like(leaf.data))
    return result


def finite_diff(f: Callable[[], float], params, eps: float = 1e-6) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` with respect to each named parameter.

    ``f`` takes no arguments and reads the parameters, which are perturbed in
    place one coordinate at a time and restored afterwards.
    """
    out: dict[str, np.ndarray] = {}
    for name, tensor in _named(params).items():
        flat = tensor.data.reshape(-1)
        grad = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(np.asarray(f()))
            flat[i] = orig - eps
            down = float(np.asarray(f()))
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * eps)
        out[name] = grad.reshape(tensor.shape)
    return out


def adam_step(store, grads: Mapping[str, np.ndarray], lr: float):
    """One bias-corrected Adam update of ``store`` in place; returns ``store``.

    ``store`` needs ``params`` (name -> Tensor) and ``adam`` (an
    :class:`AdamState`).
    """
    state: AdamState = store.adam
    for name, g in grads.items():
        if store.params[name].shape != np.shape(g):
            raise ShapeError(
                f"adam_step: gradient for {name!r} has shape {np.shape(g)}, "
                f"parameter has {store.params[name].shape}"
            )
    state.step += 1
    c1 = 1.0 - ADAM_BETA1**state.step
    c2 = 1.0 - ADAM_BETA2**state.step
    for name, g in grads.items():
        p = store.params[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return store


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )


def as_tensors(values: Iterable) -> list[Tensor]:
    return [_t(v) for v in values]
