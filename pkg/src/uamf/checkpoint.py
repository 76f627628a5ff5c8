"""Binary checkpoint format.

Layout (all integers little-endian):

    b"UAMF"                      magic
    u32  version                 currently 1
    u32  n, n bytes              model config, canonical JSON (sorted keys)
    u32  n, n bytes              opaque RNG state
    u32  count                   number of parameters
    per parameter:
        u32 n, n bytes           UTF-8 name (hierarchical path)
        u8                       dtype tag: 0 = float32, 1 = float64
        u32 rank, rank x u32     extents
        raw little-endian data
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError
from .model import ModelConfig, UAMobileFormer

MAGIC = b"UAMF"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: "OrderedDict[str, np.ndarray]"
    rng_state: bytes = b""
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)


def to_checkpoint(model: UAMobileFormer, rng_state: bytes = b"") -> Checkpoint:
    params = OrderedDict((name, p.data.copy()) for name, p in model.named_parameters())
    return Checkpoint(model.cfg, params, rng_state)


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.format_version)
    cfg = ckpt.config.to_json().encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(ckpt.rng_state)) + bytes(ckpt.rng_state)
    out += struct.pack("<I", len(ckpt.parameters))
    for name, arr in ckpt.parameters.items():
        raw_name = name.encode("utf-8")
        tag = _TAGS[np.dtype(arr.dtype)]
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<BI", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointVersionError(f"{source}: not a UAMF checkpoint (bad magic {buf[:4]!r})")
    r = _Reader(buf, source)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointTruncatedError(f"{source}: corrupt config block ({exc})") from None
    (n,) = r.unpack("<I")
    rng_state = r.take(n)
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointVersionError(f"{source}: unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        params[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Checkpoint(config, params, bytes(rng_state), version)


def save_checkpoint(model: UAMobileFormer, path, rng_state: bytes = b"") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(to_checkpoint(model, rng_state)))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def restore(model: UAMobileFormer, ckpt: Checkpoint) -> UAMobileFormer:
    """Copy checkpoint arrays into ``model``; inventories must match exactly."""
    named = OrderedDict(model.named_parameters())
    missing = [n for n in named if n not in ckpt.parameters]
    extra = [n for n in ckpt.parameters if n not in named]
    if missing or extra:
        raise CheckpointShapeError(f"parameter inventory mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in named.items():
        arr = ckpt.parameters[name]
        if arr.shape != p.shape:
            raise CheckpointShapeError(f"parameter {name}: checkpoint shape {arr.shape}, model shape {p.shape}")
        p.data = arr.astype(arr.dtype, copy=True)
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> UAMobileFormer:
    from . import tensor as T

    dtypes = {a.dtype for a in ckpt.parameters.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.dtype(np.float32)
    with T.default_dtype(dtype):
        model = UAMobileFormer(ckpt.config, np.random.default_rng(0))
    return restore(model, ckpt)
