"""Noise-prediction networks with sinusoidal time conditioning.

Two architectures share one parameter container:

* ``mlp``: flattened input, hidden swish layers, each receiving a linear
  projection of the time embedding.
* ``unet``: a small convolutional encoder/decoder with skip connections.
  Every resolution level holds one residual block (group norm, swish, conv,
  added time projection, group norm, swish, conv); levels are separated by
  2x average pooling and nearest-neighbour upsampling.

Any object with ``predict_noise(x_t, t)``, ``data_shape``, ``fingerprint()``
and ``clone()`` can stand in for a :class:`ParamStore` in the samplers; the
stubs at the bottom of this module are used for exact algebraic checks.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .schedule import Schedule, alpha_bar_at

__all__ = [
    "DenoiserConfig",
    "ParamStore",
    "ConfigError",
    "init_denoiser",
    "time_embedding",
    "predict_noise",
    "predict_x0",
    "ConstantNoise",
    "CallableNoise",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    kind: str  # "mlp" or "unet"
    data_shape: tuple[int, ...]
    widths: tuple[int, ...] = (64, 64)  # hidden widths (mlp) or channels per level (unet)
    time_embed_dim: int = 32
    groups: int = 4
    use_attention: bool = False
    max_timestep: int = 1000
    zero_init_output: bool = False

    def validate(self) -> None:
        if self.kind not in ("mlp", "unet"):
            raise ConfigError(f"unknown denoiser kind {self.kind!r}")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be a positive even number, got {self.time_embed_dim}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.use_attention:
            raise ConfigError("attention blocks are not implemented at this scale")
        if self.kind == "unet":
            if len(self.data_shape) != 3:
                raise ConfigError(f"unet needs (C, H, W) data, got {self.data_shape}")
            levels = len(self.widths)
            _, h, w = self.data_shape
            if h % 2**levels or w % 2**levels:
                raise ConfigError(f"spatial dims {h}x{w} not divisible by 2**{levels}")
            for c in self.widths:
                if c % self.groups:
                    raise ConfigError(f"{c} channels not divisible into {self.groups} groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_shape"] = list(self.data_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["data_shape"] = tuple(d["data_shape"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def time_embedding(t, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs at frequencies ``10000 ** (-2k / dim)``.

    ``t`` may be a scalar (returns shape (dim,)) or an array (returns (n, dim)).
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * k / dim)
    angles = t_arr[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass(eq=False)
class ParamStore:
    config: DenoiserConfig
    seed: int
    params: dict[str, Tensor]
    adam: AdamState = field(default_factory=AdamState)
    schedule: Schedule | None = None
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def data_shape(self) -> tuple[int, ...]:
        return self.config.data_shape

    def predict_noise(self, x_t, t):
        return predict_noise(self, x_t, t)

    def clone(self) -> "ParamStore":
        """Deep copy of parameters and optimizer state; history is not carried over."""
        return ParamStore(
            config=self.config,
            seed=self.seed,
            params={k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            adam=self.adam.copy(),
            schedule=self.schedule,
        )

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of config, parameters and Adam state."""
        if self.config != other.config or self.params.keys() != other.params.keys():
            return False
        for k in self.params:
            a, b = self.params[k].data, other.params[k].data
            if a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        sa, sb = self.adam, other.adam
        if sa.step != sb.step or sa.m.keys() != sb.m.keys():
            return False
        return all(
            sa.m[k].tobytes() == sb.m[k].tobytes() and sa.v[k].tobytes() == sb.v[k].tobytes()
            for k in sa.m
        )

    def embed_table(self) -> np.ndarray:
        table = self.meta.get("_embed_table")
        if table is None:
            table = time_embedding(np.arange(self.config.max_timestep + 1), self.config.time_embed_dim)
            self.meta["_embed_table"] = table
        return table


# -- initialization ----------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp_shapes(cfg: DenoiserConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    d = int(np.prod(cfg.data_shape))
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    prev = d
    for i, w in enumerate(cfg.widths):
        shapes[f"l{i}.w"] = ((prev, w), prev)
        shapes[f"l{i}.b"] = ((w,), 0)
        shapes[f"l{i}.temb.w"] = ((cfg.time_embed_dim, w), cfg.time_embed_dim)
        shapes[f"l{i}.temb.b"] = ((w,), 0)
        prev = w
    shapes["out.w"] = ((prev, d), prev)
    shapes["out.b"] = ((d,), 0)
    return shapes


def _resblock_shapes(prefix, cin, cout, e, shapes):
    shapes[f"{prefix}.gn1.g"] = ((cin,), -1)
    shapes[f"{prefix}.gn1.b"] = ((cin,), 0)
    shapes[f"{prefix}.conv1.w"] = ((cout, cin, 3, 3), cin * 9)
    shapes[f"{prefix}.conv1.b"] = ((cout,), 0)
    shapes[f"{prefix}.temb.w"] = ((e, cout), e)
    shapes[f"{prefix}.temb.b"] = ((cout,), 0)
    shapes[f"{prefix}.gn2.g"] = ((cout,), -1)
    shapes[f"{prefix}.gn2.b"] = ((cout,), 0)
    shapes[f"{prefix}.conv2.w"] = ((cout, cout, 3, 3), cout * 9)
    shapes[f"{prefix}.conv2.b"] = ((cout,), 0)
    if cin != cout:
        shapes[f"{prefix}.skip.w"] = ((cout, cin, 1, 1), cin)
        shapes[f"{prefix}.skip.b"] = ((cout,), 0)


def _unet_shapes(cfg: DenoiserConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    c_in = cfg.data_shape[0]
    ch = cfg.widths
    e = cfg.time_embed_dim
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    shapes["in.w"] = ((ch[0], c_in, 3, 3), c_in * 9)
    shapes["in.b"] = ((ch[0],), 0)
    prev = ch[0]
    for i, c in enumerate(ch):
        _resblock_shapes(f"down{i}", prev, c, e, shapes)
        prev = c
    _resblock_shapes("mid", prev, prev, e, shapes)
    for i in reversed(range(len(ch))):
        _resblock_shapes(f"up{i}", prev + ch[i], ch[i], e, shapes)
        prev = ch[i]
    shapes["out.gn.g"] = ((prev,), -1)
    shapes["out.gn.b"] = ((prev,), 0)
    shapes["out.w"] = ((c_in, prev, 3, 3), prev * 9)
    shapes["out.b"] = ((c_in,), 0)
    return shapes


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    cfg.validate()
    table = _mlp_shapes(cfg) if cfg.kind == "mlp" else _unet_shapes(cfg)
    return {k: v[0] for k, v in table.items()}


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> ParamStore:
    """Deterministic fan-in uniform weights, zero biases, unit norm gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    table = _mlp_shapes(cfg) if cfg.kind == "mlp" else _unet_shapes(cfg)
    params: dict[str, Tensor] = {}
    for name, (shape, fan_in) in table.items():
        if fan_in > 0:
            value = _uniform(rng, shape, fan_in)
        elif fan_in < 0:
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        if cfg.zero_init_output and name.startswith("out.") and not name.startswith("out.gn"):
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return ParamStore(config=cfg, seed=seed, params=params)


# -- forward passes ----------------------------------------------------------


def _time_features(p: ParamStore, t, batch: int) -> Tensor:
    t_arr = np.asarray(t, dtype=np.int64)
    if t_arr.ndim == 0:
        t_arr = np.full(batch, int(t_arr))
    if t_arr.shape != (batch,):
        raise ad.ShapeError(f"timesteps {t_arr.shape} do not match batch of {batch}")
    if t_arr.min() < 0 or t_arr.max() > p.config.max_timestep:
        raise ad.ShapeError(f"timestep outside 0..{p.config.max_timestep}")
    return ad.gather(Tensor(p.embed_table()), t_arr)


def _linear(x, p, prefix):
    return ad.add(ad.matmul(x, p[prefix + ".w"]), p[prefix + ".b"])


def _mlp_forward(store: ParamStore, x: Tensor, temb: Tensor) -> Tensor:
    p = store.params
    h = x
    for i in range(len(store.config.widths)):
        h = ad.swish(_linear(h, p, f"l{i}") + _linear(temb, p, f"l{i}.temb"))
    return _linear(h, p, "out")


def _conv(x, p, prefix):
    return ad.conv2d(x, p[prefix + ".w"], p[prefix + ".b"])


def _resblock(x, temb, p, prefix, groups):
    h = ad.swish(ad.group_norm(x, groups, p[prefix + ".gn1.g"], p[prefix + ".gn1.b"]))
    h = _conv(h, p, prefix + ".conv1")
    tproj = _linear(temb, p, prefix + ".temb")
    h = h + ad.reshape(tproj, tproj.shape + (1, 1))
    h = ad.swish(ad.group_norm(h, groups, p[prefix + ".gn2.g"], p[prefix + ".gn2.b"]))
    h = _conv(h, p, prefix + ".conv2")
    skip = _conv(x, p, prefix + ".skip") if prefix + ".skip.w" in p else x
    return h + skip


def _downsample(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ad.tmean(ad.reshape(x, (b, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


_UP = np.ones((1, 1, 1, 2, 1, 2))


def _upsample(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    y = ad.mul(ad.reshape(x, (b, c, h, 1, w, 1)), _UP)
    return ad.reshape(y, (b, c, 2 * h, 2 * w))


def _unet_forward(store: ParamStore, x: Tensor, temb: Tensor) -> Tensor:
    p = store.params
    g = store.config.groups
    levels = len(store.config.widths)
    h = _conv(x, p, "in")
    skips = []
    for i in range(levels):
        h = _resblock(h, temb, p, f"down{i}", g)
        skips.append(h)
        if i < levels - 1:
            h = _downsample(h)
    h = _resblock(h, temb, p, "mid", g)
    for i in reversed(range(levels)):
        if i < levels - 1:
            h = _upsample(h)
        h = _resblock(ad.concat([h, skips[i]], axis=1), temb, p, f"up{i}", g)
    h = ad.swish(ad.group_norm(h, g, p["out.gn.g"], p["out.gn.b"]))
    return _conv(h, p, "out")


def predict_noise(p: ParamStore, x_t, t):
    """Predicted noise for ``x_t`` (shape ``data_shape`` or a leading batch axis).

    Returns a Tensor when ``x_t`` is a Tensor, else a numpy array.
    """
    as_array = not isinstance(x_t, Tensor)
    x = ad._t(x_t)
    shape = p.config.data_shape
    if x.shape == shape:
        batched = False
        xb = ad.reshape(x, (1,) + shape)
    elif x.shape[1:] == shape:
        batched = True
        xb = x
    else:
        raise ad.ShapeError(f"predict_noise: input {x.shape} does not match data shape {shape}")
    n = xb.shape[0]
    temb = _time_features(p, t, n)
    if p.config.kind == "mlp":
        out = _mlp_forward(p, ad.reshape(xb, (n, -1)), temb)
    else:
        out = _unet_forward(p, xb, temb)
    out = ad.reshape(out, x.shape if not batched else (n,) + shape)
    return out.data if as_array else out


def predict_x0(p, x_t, t: int, s: Schedule):
    """Clean-signal estimate ``(x_t - sqrt(1 - ab) * eps) / sqrt(ab)``."""
    ab = alpha_bar_at(s, t)
    eps = p.predict_noise(x_t, t)
    return _x0_from_eps(x_t, eps, ab)


def _x0_from_eps(x_t, eps, ab: float):
    if isinstance(x_t, Tensor) or isinstance(eps, Tensor):
        return ad.div(ad.sub(x_t, ad.mul(eps, np.sqrt(1.0 - ab))), np.sqrt(ab))
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


# -- stand-in models ---------------------------------------------------------


class ConstantNoise:
    """Noise model returning a fixed value everywhere (0 gives the identity denoiser)."""

    def __init__(self, value, data_shape: tuple[int, ...]):
        self.value = np.broadcast_to(np.asarray(value, dtype=np.float64), data_shape).copy()
        self.data_shape = tuple(data_shape)
        self.calls = 0

    def predict_noise(self, x_t, t):
        self.calls += 1
        out = np.broadcast_to(self.value, np.shape(x_t.data if isinstance(x_t, Tensor) else x_t)).copy()
        return Tensor(out) if isinstance(x_t, Tensor) else out

    def fingerprint(self) -> str:
        return "const:" + hashlib.sha256(self.value.tobytes()).hexdigest()

    def clone(self):
        return copy.deepcopy(self)


class CallableNoise:
    """Noise model backed by an arbitrary ``fn(x_t, t) -> array``."""

    def __init__(self, fn, data_shape: tuple[int, ...], tag: str = "callable"):
        self.fn = fn
        self.data_shape = tuple(data_shape)
        self.tag = tag

    def predict_noise(self, x_t, t):
        if isinstance(x_t, Tensor):
            return Tensor(self.fn(x_t.data, t))
        return self.fn(x_t, t)

    def fingerprint(self) -> str:
        return f"{self.tag}:{id(self.fn)}"

    def clone(self):
        return self
