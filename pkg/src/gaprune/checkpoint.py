"""GAPCKPT1 checkpoints: named float64 tensors followed by packed mask bitsets.

Layout (little-endian)::

    b"GAPCKPT1"
    u32 tensor count
      u16 name length, UTF-8 name, u8 rank, u32 dims[rank], u8 dtype (1 = f64), raw data
    u32 mask count
      u16 name length, UTF-8 name, u8 rank, u32 dims[rank], ceil(n / 8) bytes, LSB-first

Everything after the magic is the "tensor block", also embedded in PGAP messages.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .nn import MLP, Linear, ReLU

MAGIC = b"GAPCKPT1"
DTYPE_F64 = 1
_PARAM = re.compile(r"^(?P<layer>.+)\.(?P<kind>weight|bias)$")


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_shape(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).reshape(-1), bitorder="little").tobytes()


def encode_block(tensors: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        out += [_pack_name(name), _pack_shape(arr.shape), struct.pack("<B", DTYPE_F64), arr.tobytes(order="C")]
    out.append(struct.pack("<I", len(masks)))
    for name, mask in masks.items():
        out += [_pack_name(name), _pack_shape(mask.shape), pack_mask(mask)]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated data")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc

    def shape(self) -> tuple[int, ...]:
        (rank,) = self.unpack("<B")
        return tuple(self.unpack(f"<{rank}I"))


def decode_block(buf: bytes, pos: int = 0) -> tuple[dict, dict, int]:
    """Parse a tensor block; returns ``(tensors, masks, end offset)``."""
    r = _Reader(buf, pos)
    tensors = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.name()
        shape = r.shape()
        (dtype,) = r.unpack("<B")
        if dtype != DTYPE_F64:
            raise FormatError(f"unsupported dtype code {dtype} for {name}")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    masks = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.name()
        shape = r.shape()
        n = int(np.prod(shape, dtype=np.int64))
        bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        masks[name] = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(shape)
    return tensors, masks, r.pos


def model_from_tensors(tensors: Mapping[str, np.ndarray]) -> MLP:
    """Rebuild an MLP (ReLU between consecutive Linear layers) from named tensors."""
    order, params = [], {}
    for key, arr in tensors.items():
        m = _PARAM.match(key)
        if m is None:
            raise FormatError(f"unexpected tensor name {key!r}")
        layer = m["layer"]
        if layer not in params:
            order.append(layer)
            params[layer] = {}
        params[layer][m["kind"]] = arr
    layers = []
    for i, name in enumerate(order):
        p = params[name]
        if set(p) != {"weight", "bias"}:
            raise FormatError(f"layer {name} needs both weight and bias")
        if i:
            layers.append(ReLU())
        layers.append(Linear(name, p["weight"].copy(), p["bias"].copy()))
    if not layers:
        raise FormatError("no tensors")
    return MLP(layers)


def dumps(model: MLP, masks: Mapping[str, np.ndarray]) -> bytes:
    return MAGIC + encode_block(model.parameters(), masks)


def loads(buf: bytes) -> tuple[MLP, dict[str, np.ndarray]]:
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a GAPCKPT1 checkpoint")
    tensors, masks, end = decode_block(buf, len(MAGIC))
    if end != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    model = model_from_tensors(tensors)
    names = {lin.name: lin.weight.shape for lin in model.linears()}
    for name, mask in masks.items():
        if names.get(name) != mask.shape:
            raise FormatError(f"mask {name} does not match any weight")
    return model, masks


def save_checkpoint(model: MLP, masks: Mapping[str, np.ndarray], path):
    Path(path).write_bytes(dumps(model, masks))


def load_checkpoint(path) -> tuple[MLP, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
