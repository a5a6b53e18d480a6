"""Desk-scale datasets: two synthetic 2-D sets, IDX image files and CSV tables."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetSpec

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def make_moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_top = (n + 1) // 2
    n_bot = n - n_top
    t_top = np.linspace(0, np.pi, n_top)
    t_bot = np.linspace(0, np.pi, n_bot)
    top = np.column_stack([np.cos(t_top), np.sin(t_top)])
    bot = np.column_stack([1 - np.cos(t_bot), 0.5 - np.sin(t_bot)])
    x = np.vstack([top, bot]) + rng.normal(0, noise, (n, 2))
    y = np.concatenate([np.zeros(n_top, np.int64), np.ones(n_bot, np.int64)])
    return x, y


def make_spiral(n: int, classes: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved spiral arms, one per class; class sizes differ by at most one."""
    xs, ys = [], []
    for k in range(classes):
        m = n // classes + (1 if k < n % classes else 0)
        r = np.linspace(0.0, 1.0, m)
        theta = np.linspace(k * 4.0, (k + 1) * 4.0, m) + rng.normal(0, noise, m)
        xs.append(np.column_stack([r * np.sin(theta), r * np.cos(theta)]))
        ys.append(np.full(m, k, np.int64))
    return np.vstack(xs), np.concatenate(ys)


# ---------------------------------------------------------------------------
# IDX

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path: str | Path, expect_magic: int | None = None) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expect_magic:08x}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: truncated dimensions at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != need:
        raise DatasetError(f"{path}: payload at byte offset {header_end} holds {len(raw) - header_end} "
                           f"bytes, dims {dims} need {need}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write unsigned-byte IDX (images: 3-D, labels: 1-D)."""
    arr = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_pair(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[..., None] / 255.0
    return x, labels.astype(np.int64)


def _labels_path_for(images_path: str) -> str:
    p = Path(images_path)
    name = p.name.replace("images", "labels").replace("idx3", "idx1")
    if name == p.name:
        raise DatasetError(f"cannot infer a labels file for {images_path}; set dataset.labels_path")
    return str(p.with_name(name))


# ---------------------------------------------------------------------------
# CSV


def load_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "label" not in header:
            raise DatasetError(f"{path}: header row with a 'label' column is required")
        li = header.index("label")
        rows = [r for r in reader if r]
    data = np.array([[float(v) for v in r] for r in rows])
    y = data[:, li].astype(np.int64)
    x = np.delete(data, li, axis=1)
    return x, y


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span


def load_dataset(spec: DatasetSpec, seed: int) -> tuple[Split, Split]:
    """Deterministic (train, test) split with features scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    if spec.kind == "synthetic_moons":
        x, y = make_moons(spec.points, spec.noise, rng)
        x = _minmax(x)
    elif spec.kind == "synthetic_spiral":
        x, y = make_spiral(spec.points, spec.classes, spec.noise, rng)
        x = _minmax(x)
    elif spec.kind == "idx_images":
        x, y = load_idx_pair(spec.path, spec.labels_path or _labels_path_for(spec.path))
    elif spec.kind == "csv_table":
        x, y = load_csv(spec.path)
        x = _minmax(x)
    else:
        raise DatasetError(f"unknown dataset kind {spec.kind!r}")
    order = np.random.default_rng([seed, 7]).permutation(len(y))
    n_test = int(round(spec.test_fraction * len(y)))
    test, train = order[:n_test], order[n_test:]
    return Split(x[train], y[train]), Split(x[test], y[test])
