"""Attention scaling benchmark: pair counts, score-buffer peaks, FLOPs and wall time."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import Full, WindowGlobal, WindowGlobalRandom, attend, count_pairs, track

DEFAULT_NS = (512, 1024, 2048, 4096)
CSV_COLUMNS = ("pattern", "n", "pairs", "peak_elems", "flops", "ms_median")
# dense n x n buffers beyond this length are not allocated
FULL_CEILING = 4096


@dataclass
class BenchPoint:
    pattern: str
    n: int
    pairs: int
    peak_elems: int
    flops: int
    ms_median: float
    trials: int
    note: str = ""

    def row(self) -> dict:
        ms = "" if math.isnan(self.ms_median) else f"{self.ms_median:.3f}"
        return {"pattern": self.pattern, "n": self.n, "pairs": self.pairs,
                "peak_elems": self.peak_elems, "flops": self.flops, "ms_median": ms}


def make_pattern(kind: str, window: int = 33, n_globals: int = 1, block_size: int = 64,
                 random_blocks: int = 3, seed: int = 0):
    globals_ = tuple(range(n_globals))
    if kind == "full":
        return Full()
    if kind == "window-global":
        return WindowGlobal(window, globals_)
    if kind == "window-global-random":
        return WindowGlobalRandom(window, globals_, block_size, random_blocks, seed)
    raise ValueError(f"unknown pattern {kind!r}")


def run_sweep(patterns=("full", "window-global", "window-global-random"), ns=DEFAULT_NS,
              d: int = 64, trials: int = 5, seed: int = 0, heads: int = 1,
              full_ceiling: int = FULL_CEILING, time_kernels: bool = True,
              **pattern_kw) -> list[BenchPoint]:
    """Run each kernel once per trial at each length.

    Counters come from the kernels' own instrumentation and do not depend on
    timing. With ``time_kernels=False`` a single forward pass gathers them.
    """
    ns = list(ns)
    if ns != sorted(ns):
        raise ValueError("sequence lengths must be ascending")
    if trials < 3:
        raise ValueError("trials must be >= 3")
    out = []
    for kind in patterns:
        pattern = make_pattern(kind, seed=seed, **pattern_kw)
        for n in ns:
            if isinstance(pattern, Full) and n > full_ceiling:
                out.append(BenchPoint(kind, n, n * n, heads * n * n, 4 * n * n * d, math.nan, 0,
                                      f"skipped: n={n} exceeds the full-attention ceiling "
                                      f"{full_ceiling}; counters are analytic"))
                continue
            rng = np.random.default_rng([seed, n])
            q, k, v = (T.tensor(rng.standard_normal((n, d)).astype(np.float32)) for _ in range(3))
            times = []
            with T.no_grad(), track() as stats:
                for _ in range(trials if time_kernels else 1):
                    t0 = time.perf_counter()
                    attend(q, k, v, pattern, heads=heads)
                    times.append((time.perf_counter() - t0) * 1e3)
            calls = max(stats.calls, 1)
            pairs = stats.pairs // calls
            if pairs != count_pairs(pattern, n):
                raise AssertionError(f"{kind} n={n}: kernel saw {pairs} pairs, "
                                     f"count_pairs says {count_pairs(pattern, n)}")
            out.append(BenchPoint(kind, n, pairs, stats.peak_score_elements, stats.flops // calls,
                                  statistics.median(times) if time_kernels else math.nan,
                                  len(times) if time_kernels else 0))
    return out


def fit_scaling(points: list[BenchPoint]) -> dict[str, float]:
    """Least-squares slope of log(pairs) against log(n), per pattern."""
    by: dict[str, list[BenchPoint]] = {}
    for p in points:
        by.setdefault(p.pattern, []).append(p)
    out = {}
    for kind, pts in by.items():
        if len(pts) < 3:
            raise ValueError(f"pattern {kind!r} has {len(pts)} points; at least 3 are needed")
        x = np.log([p.n for p in pts])
        y = np.log([p.pairs for p in pts])
        out[kind] = float(np.polyfit(x, y, 1)[0])
    return out


def to_csv(points: list[BenchPoint]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for p in points:
        writer.writerow(p.row())
    return buf.getvalue()
