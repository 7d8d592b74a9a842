"""Binary checkpoint container: named float tensors plus the run config.

Layout (all integers little-endian)::

    "PYRA"                      4 bytes magic
    version                     u32
    config length               u64, then that many bytes of UTF-8 JSON
    tensor count                u64
    per tensor:
        name length             u16, then UTF-8 name
        dtype tag               u8 (0 = float32, 1 = float64)
        rank                    u8
        dims                    u64 each
        data                    little-endian, C order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PYRA"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config_bytes: bytes
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    @property
    def config(self) -> dict:
        return json.loads(self.config_bytes.decode("utf-8")) if self.config_bytes else {}


def _config_bytes(config) -> bytes:
    if config is None:
        return b""
    if isinstance(config, bytes):
        return config
    if isinstance(config, str):
        return config.encode("utf-8")
    return json.dumps(config, sort_keys=True).encode("utf-8")


def encode(tensors: dict[str, np.ndarray], config=None) -> bytes:
    cfg = _config_bytes(config)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(cfg)), cfg, struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise TypeError(f"tensor {name!r}: dtype {arr.dtype} not storable (float32/float64 only)")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r}: rank {arr.ndim} exceeds 255")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]!r}...")
        parts += [
            struct.pack("<H", len(raw_name)),
            raw_name,
            struct.pack("<BB", _TAG_OF[arr.dtype], arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(),
        ]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        avail = len(self.buf) - self.pos
        if n > avail:
            raise CheckpointFormatError(f"truncated {what}: expected {n} bytes, {avail} available", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}, expected {VERSION}", 4)
    (cfg_len,) = rd.unpack("<Q", "config length")
    cfg = rd.take(cfg_len, "config")
    (count,) = rd.unpack("<Q", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        start = rd.pos
        (name_len,) = rd.unpack("<H", f"tensor {i} name length")
        try:
            name = rd.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"tensor {i} name is not UTF-8", start + 2) from None
        tag_pos = rd.pos
        tag, rank = rd.unpack("<BB", f"tensor {name!r} header")
        if tag not in DTYPE_TAGS:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype tag {tag}", tag_pos)
        dims = rd.unpack(f"<{rank}Q", f"tensor {name!r} dims")
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
        data = rd.take(nbytes, f"tensor {name!r} data")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", start)
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if rd.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - rd.pos} trailing bytes after last tensor", rd.pos)
    return Checkpoint(config_bytes=cfg, tensors=tensors, version=version)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config=None) -> int:
    """Write a checkpoint; returns the number of bytes written."""
    data = encode(tensors, config)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_model(path, state, run_config) -> int:
    """Store every named tensor of a model with the run config that builds it."""
    tensors = {k: p.data for k, p in state.named_parameters().items()}
    return save_checkpoint(path, tensors, run_config.to_json())


def load_model(path):
    """Rebuild the model from the stored config and overwrite its tensors; returns ``(state, run_config)``."""
    from .config import RunConfig

    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_json(ckpt.config_bytes.decode("utf-8"))
    state = cfg.build_model()
    params = state.named_parameters()
    missing = sorted(set(params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint does not match its config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise ValueError(f"tensor {name}: stored shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()
    return state, cfg
