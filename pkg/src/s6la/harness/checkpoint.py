"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"S6LACKPT"
    version      u32       1
    config_len   u32       byte length of the UTF-8 config echo
    config       bytes     RunConfig.to_text()
    count        u32       number of arrays
    manifest     count x { name_len u16, name UTF-8, dtype u8 (0 = f64, 1 = f32),
                           ndim u8, dims u32 x ndim }
    payload      arrays in manifest order, little-endian IEEE-754, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"S6LACKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    arrays: dict[str, np.ndarray]
    version: int = VERSION

    @property
    def manifest(self) -> list[tuple[str, np.dtype, tuple]]:
        return [(k, v.dtype, v.shape) for k, v in self.arrays.items()]


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], config_text: str) -> None:
    cfg = config_text.encode()
    head = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    body = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        enc = name.encode()
        head.append(struct.pack("<H", len(enc)) + enc)
        head.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    Path(path).write_bytes(b"".join(head + body))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    version, cfg_len = struct.unpack_from("<II", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos += 8
    config_text = raw[pos:pos + cfg_len].decode()
    pos += cfg_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        manifest.append((name, _DTYPES[code], dims))
    arrays = {}
    for name, dtype, dims in manifest:
        nbytes = int(np.prod(dims)) * dtype.itemsize
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload truncated at {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
        pos += nbytes
    return Checkpoint(config_text, arrays, version)


def model_arrays(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def assign_arrays(model, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"parameter names differ; missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
        p.grad = np.zeros_like(p.data)
