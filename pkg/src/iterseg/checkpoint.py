"""Binary checkpoint format.

Layout (little-endian)::

    b"ISEG"  magic
    u16      format version (1)
    u32      entry count
    per entry:
        u16 name length, name bytes (utf-8)
        u8  rank, u32 * rank dims
        f32 * prod(dims) values

Entries are ``<layer>.weight`` / ``<layer>.bias`` in topology order. Values are
stored as 32-bit floats, so round trips are bit-exact for float32 parameters.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Union

import numpy as np

from .network import Layer, NetworkConfig, ParameterSet, layer_specs
from .tensor import Tensor

MAGIC = b"ISEG"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint, or one that does not fit the requested config."""


def save_checkpoint(params: ParameterSet, path: Union[str, Path]) -> None:
    entries = list(params.named_tensors())
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, t in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    """Parse a checkpoint into name -> float32 array without checking topology."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of entry {i}")
        name = r.take(nlen, f"name of entry {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"values of {name}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last entry")
    return out


def load_checkpoint(path: Union[str, Path], config: NetworkConfig, dtype=np.float32) -> ParameterSet:
    """Load a checkpoint and check it against the topology of ``config``."""
    arrays = read_checkpoint(path)
    params = ParameterSet(config)
    for spec in layer_specs(config):
        tensors = []
        for suffix, shape in (("weight", spec.weight_shape), ("bias", (spec.out_channels,))):
            key = f"{spec.name}.{suffix}"
            if key not in arrays:
                raise CheckpointError(f"{path}: layer {key} missing from checkpoint")
            arr = arrays.pop(key)
            if arr.shape != shape:
                raise CheckpointError(
                    f"{path}: shape mismatch at layer {key}: checkpoint has {arr.shape}, config expects {shape}"
                )
            tensors.append(Tensor(arr.astype(dtype), requires_grad=True))
        params.layers[spec.name] = Layer(*tensors)
    if arrays:
        raise CheckpointError(f"{path}: unexpected layer {next(iter(arrays))} not in configured topology")
    return params
