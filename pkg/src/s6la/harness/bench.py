"""Forward-pass timing of the S6LA CNN across input resolutions."""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from ..cnn import CnnNet
from ..tensor import no_record

BENCH_COLUMNS = ("resolution", "pixels", "median_seconds", "min_seconds", "std_seconds", "repeats")


def pin_allocator() -> bool:
    """Keep freed buffers on the heap (glibc only) so timings are not dominated
    by page faults whose pattern depends on earlier allocations in the process."""
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        m_trim, m_mmap = -1, -3
        return bool(libc.mallopt(m_mmap, 32 * 1024 * 1024)) and bool(libc.mallopt(m_trim, 1 << 30))
    except (OSError, AttributeError, TypeError):
        return False


def time_forward(model, x: np.ndarray, repeats: int) -> np.ndarray:
    with no_record():
        model(x)  # warm-up
        out = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(x)
            out.append(time.perf_counter() - t0)
    return np.array(out)


def run_bench(resolutions: Sequence[int] = (16, 32, 64), repeats: int = 7, batch: int = 4,
              width: int = 16, latent_n: int = 32, blocks: Sequence[int] = (2,),
              seed: int = 0) -> list[dict]:
    """Forward wall time per resolution for a fixed model and batch.

    Repeats are interleaved across resolutions so slow drift in machine load
    hits every size alike.
    """
    pin_allocator()
    rng = np.random.default_rng(seed)
    cases = []
    for r in resolutions:
        model = CnnNet((r, r, 3), 10, width=width, latent_n=latent_n, blocks=blocks,
                       aggregation="s6la", seed=seed)
        cases.append((r, model, rng.normal(size=(batch, r, r, 3))))
    times = {r: [] for r in resolutions}
    for _ in range(repeats):
        for r, model, x in cases:
            times[r].extend(time_forward(model, x, 1))
    rows = []
    for r in resolutions:
        t = np.array(times[r])
        rows.append({"resolution": r, "pixels": r * r, "median_seconds": float(np.median(t)),
                     "min_seconds": float(t.min()), "std_seconds": float(t.std()), "repeats": repeats})
    return rows


def fit_slope(rows: list[dict]) -> float:
    """Least-squares seconds per pixel."""
    px = np.array([r["pixels"] for r in rows], dtype=float)
    t = np.array([r["median_seconds"] for r in rows], dtype=float)
    return float(np.polyfit(px, t, 1)[0])


def growth_ratios(rows: list[dict]) -> list[float]:
    """Median-time ratio between consecutive resolutions."""
    t = [r["median_seconds"] for r in rows]
    return [b / a for a, b in zip(t, t[1:])]


def write_bench(rows: list[dict], out_dir: str | Path, figures: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if figures:
        from .plotting import plot_bench
        plot_bench(rows, out / "bench.png", fit_slope(rows))
    return path
