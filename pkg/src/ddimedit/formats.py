"""Binary and image file formats.

Checkpoint container (all integers little-endian)::

    magic        b"DDEK"
    version      u16
    schedule     u32 T, f64 beta_start, f64 beta_end
    config       u32 length + UTF-8 JSON (denoiser config, seed, adam step)
    count        u32 number of tensor blocks
    block        u16 name length, name (UTF-8), u8 rank, rank x u32 dims,
                 prod(dims) x f32 payload
    crc32        u32 over every preceding byte

Parameters are written as ``p.<name>`` blocks and Adam moments as
``m.<name>`` / ``v.<name>``.  Payloads are 32-bit, so a float64 store is
rounded once on its first save; from then on save/load/save is byte-stable.

Raw tensor file::

    magic b"DDRT", u8 rank, rank x u32 dims, f32 payload

Images are binary portable pixmaps: P5 for one channel, P6 for three,
maxval 255.  Arrays are (C, H, W) floats in [0, 1]; writing clamps and rounds
half up (``floor(255 x + 0.5)``).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .denoiser import DenoiserConfig, ParamStore
from .schedule import Schedule, make_linear_schedule

__all__ = [
    "FormatError",
    "CorruptFileError",
    "VersionMismatchError",
    "ChecksumError",
    "MalformedHeaderError",
    "DimensionOverflowError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "write_raw_tensor",
    "read_raw_tensor",
    "write_pixmap",
    "read_pixmap",
    "read_image",
    "write_image",
]

CKPT_MAGIC = b"DDEK"
CKPT_VERSION = 1
RAW_MAGIC = b"DDRT"
MAX_DIM = 1 << 24
MAX_PIXMAP_SIDE = 1 << 15


class FormatError(ValueError):
    """Base class for file-format problems."""


class CorruptFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, error=CorruptFileError):
        self.buf = buf
        self.pos = 0
        self.error = error

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise self.error(f"unexpected end of data at byte {self.pos} (wanted {n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _as_f32(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.size and np.max(np.abs(arr)) > np.finfo(np.float32).max:
        raise ValueError("values exceed the 32-bit float range")
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.asarray(arr)
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + _as_f32(arr)


def _read_dims(r: _Reader) -> tuple[int, ...]:
    (rank,) = r.unpack("B")
    dims = r.unpack(f"{rank}I")
    if any(d > MAX_DIM for d in dims):
        raise CorruptFileError(f"implausible tensor dims {dims}")
    return tuple(dims)


def _read_payload(r: _Reader, dims) -> np.ndarray:
    n = int(np.prod(dims, dtype=np.int64))
    return np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)


def checkpoint_bytes(store: ParamStore) -> bytes:
    s = store.schedule
    if s is None:
        raise ValueError("store has no schedule to record")
    if s != make_linear_schedule(s.T, s.beta_start, s.beta_end):
        raise ValueError("only linear schedules can be recorded in the checkpoint header")
    record = {"config": store.config.to_dict(), "seed": store.seed, "adam_step": store.adam.step}
    config = json.dumps(record, sort_keys=True).encode("utf-8")
    blocks = [_tensor_block("p." + k, t.data) for k, t in sorted(store.params.items())]
    for prefix, moments in (("m.", store.adam.m), ("v.", store.adam.v)):
        blocks += [_tensor_block(prefix + k, a) for k, a in sorted(moments.items())]
    body = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<H", CKPT_VERSION),
            struct.pack("<Idd", s.T, s.beta_start, s.beta_end),
            struct.pack("<I", len(config)),
            config,
            struct.pack("<I", len(blocks)),
            *blocks,
        ]
    )
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, store: ParamStore) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


def _parse_checkpoint(buf: bytes) -> ParamStore:
    r = _Reader(buf)
    if r.take(4) != CKPT_MAGIC:
        raise CorruptFileError("bad checkpoint magic")
    (version,) = r.unpack("H")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    T, beta_start, beta_end = r.unpack("Idd")
    (n_config,) = r.unpack("I")
    try:
        record = json.loads(r.take(n_config).decode("utf-8"))
        config = DenoiserConfig.from_dict(record["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"unreadable config record: {exc}") from exc
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("H")
        try:
            name = r.take(n_name).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError("unreadable tensor name") from exc
        tensors[name] = _read_payload(r, _read_dims(r))
    body_end = r.pos
    (crc,) = r.unpack("I")
    if r.pos != len(buf):
        raise CorruptFileError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    try:
        schedule = make_linear_schedule(T, beta_start, beta_end)
    except ValueError as exc:
        raise CorruptFileError(f"invalid schedule header: {exc}") from exc

    dtype = ad.get_dtype()
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        kind, _, key = name.partition(".")
        target = {"p": params, "m": m, "v": v}.get(kind)
        if target is None:
            raise CorruptFileError(f"unknown tensor block {name!r}")
        target[key] = arr.astype(dtype)
    return ParamStore(
        config=config,
        seed=int(record.get("seed", 0)),
        params={k: Tensor(a, requires_grad=True, name=k) for k, a in params.items()},
        adam=AdamState(m=m, v=v, step=int(record.get("adam_step", 0))),
        schedule=schedule,
    )


def load_checkpoint(path) -> ParamStore:
    return _parse_checkpoint(Path(path).read_bytes())


# -- raw tensors -------------------------------------------------------------


def raw_tensor_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    head = RAW_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + _as_f32(arr)


def write_raw_tensor(path, arr) -> None:
    Path(path).write_bytes(raw_tensor_bytes(arr))


def read_raw_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != RAW_MAGIC:
        raise CorruptFileError("bad raw-tensor magic")
    arr = _read_payload(r, _read_dims(r))
    if r.pos != len(buf):
        raise CorruptFileError(f"{len(buf) - r.pos} trailing bytes in raw tensor")
    return arr.astype(np.float32)


# -- portable pixmaps --------------------------------------------------------


def pixmap_bytes(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got shape {img.shape}")
    c, h, w = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


def write_pixmap(path, img) -> None:
    Path(path).write_bytes(pixmap_bytes(img))


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError("pixmap header ended early")
        tokens.append(buf[start:pos])
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    return tokens, pos + 1


def parse_pixmap(buf: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(buf, 4)
    magic, *rest = tokens
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"unsupported pixmap magic {magic!r}")
    try:
        w, h, maxval = (int(tok) for tok in rest)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer header field: {exc}") from exc
    if maxval != 255:
        raise MalformedHeaderError(f"maxval {maxval} unsupported (need 255)")
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"bad dimensions {w}x{h}")
    if w > MAX_PIXMAP_SIDE or h > MAX_PIXMAP_SIDE:
        raise DimensionOverflowError(f"dimensions {w}x{h} exceed {MAX_PIXMAP_SIDE}")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    data = buf[offset : offset + need]
    if len(data) < need:
        raise DimensionOverflowError(f"header declares {need} samples, file holds {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def read_pixmap(path) -> np.ndarray:
    return parse_pixmap(Path(path).read_bytes())


def read_image(path) -> np.ndarray:
    """Read a pixmap (``.pgm``/``.ppm``/``.pnm``) or a raw tensor file."""
    if Path(path).suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pixmap(path)
    return read_raw_tensor(path).astype(np.float64)


def write_image(path, img) -> None:
    if Path(path).suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pixmap(path, img)
    else:
        write_raw_tensor(path, img)
