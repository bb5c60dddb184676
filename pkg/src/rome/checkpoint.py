"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic      8 bytes  b"ROMECKPT"
    version    u32
    width      u8       bytes per scalar (4 or 8)
    meta_len   u64      followed by UTF-8 JSON metadata
    n_tensors  u32
    per tensor: name_len u32, name, rank u32, extents u64 * rank, payload
    crc32      u32      over every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ROMECKPT"
VERSION = 1


class CheckpointError(ValueError):
    """The checkpoint file is unreadable, corrupt or from another version."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    epoch: int = 0
    rng_state: dict | None = None
    vocabulary: list[str] = field(default_factory=list)
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scalar_width(self) -> int:
        widths = {a.dtype.itemsize for a in self.params.values()}
        if len(widths) > 1:
            raise CheckpointError(f"mixed scalar widths {sorted(widths)} in one checkpoint")
        return widths.pop() if widths else 4


_DTYPE_FOR_WIDTH = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temporary file in the target directory is renamed into place."""
    width = ckpt.scalar_width
    dtype = _DTYPE_FOR_WIDTH[width]
    meta = {"config": ckpt.config, "epoch": ckpt.epoch, "rng_state": ckpt.rng_state,
            "vocabulary": ckpt.vocabulary, "adam_step": ckpt.adam_step}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = list(ckpt.params.items())
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.adam_m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.adam_v.items()]

    chunks = [MAGIC, struct.pack("<IB", VERSION, width), struct.pack("<Q", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
                      + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, width = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    if width not in _DTYPE_FOR_WIDTH:
        raise CheckpointError(f"{path}: unsupported scalar width {width}")
    dtype = _DTYPE_FOR_WIDTH[width]
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    (count,) = r.unpack("<I")
    params, adam_m, adam_v = {}, {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(n * width), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if name.startswith("adam.m/"):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            adam_v[name[7:]] = arr
        else:
            params[name] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")
    return Checkpoint(params=params, config=meta["config"], epoch=meta["epoch"], rng_state=meta["rng_state"],
                      vocabulary=meta["vocabulary"], adam_step=meta["adam_step"], adam_m=adam_m, adam_v=adam_v)
