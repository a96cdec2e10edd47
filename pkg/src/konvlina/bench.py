"""Wall-clock scaling of exact vs Nystrom attention."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from konvlina.attention import AttentionConfig, exact_attention, nystrom_attention
from konvlina.core.rng import make_rng
from konvlina.core.tensor import no_record

BENCH_COLUMNS = ("method", "N", "m", "heads", "wall_ns_median", "wall_ns_p10", "wall_ns_p90", "rel_frobenius_err")
METHODS = ("exact", "nystrom")


@dataclass
class BenchRow:
    method: str
    N: int
    m: int
    heads: int
    wall_ns_median: int
    wall_ns_p10: int
    wall_ns_p90: int
    rel_frobenius_err: float


def _time(fn: Callable[[], object], repeats: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    times = np.empty(repeats, dtype=np.int64)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times[i] = time.perf_counter_ns() - t0
    return times


def bench_attention(n_values: Sequence[int], m_values: Sequence[int], heads: int = 1, head_dim: int = 32,
                    repeats: int = 9, warmup: int = 1, seed: int = 0, pinv_iterations: int = 12,
                    on_row: Callable[[BenchRow], None] | None = None) -> list[BenchRow]:
    """One row per (method, N, m). The exact row repeats its timing per m cell."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    with no_record():
        for n in n_values:
            rng = make_rng(seed, "bench", n)
            Q, K, V = (rng.normal(size=(heads, n, head_dim)) for _ in range(3))
            for m in m_values:
                if m > n:
                    raise ValueError(f"landmark count m={m} exceeds N={n}")
                cfg = AttentionConfig(heads=heads, head_dim=head_dim, landmarks=m, registers=0,
                                      landmark_mode="segment-means", pinv_iterations=pinv_iterations,
                                      pinv_warn_tol=np.inf, max_len=n)
                ref = exact_attention(Q, K, V).data
                approx = nystrom_attention(Q, K, V, cfg).data
                err = float(np.linalg.norm(approx - ref) / np.linalg.norm(ref))
                for method in METHODS:
                    if method == "exact":
                        fn, e = (lambda: exact_attention(Q, K, V)), 0.0
                    else:
                        fn, e = (lambda: nystrom_attention(Q, K, V, cfg)), err
                    t = _time(fn, repeats, warmup)
                    row = BenchRow(method, n, m, heads, int(np.median(t)), int(np.percentile(t, 10)),
                                   int(np.percentile(t, 90)), e)
                    rows.append(row)
                    if on_row is not None:
                        on_row(row)
    return rows


def fit_slopes(rows: Sequence[BenchRow]) -> dict[tuple[str, int], float]:
    """Least-squares slope of log(median time) against log(N), per (method, m)."""
    out = {}
    for key in sorted({(r.method, r.m) for r in rows}):
        sel = sorted((r for r in rows if (r.method, r.m) == key), key=lambda r: r.N)
        if len(sel) < 2:
            continue
        x = np.log([r.N for r in sel])
        y = np.log([r.wall_ns_median for r in sel])
        out[key] = float(np.polyfit(x, y, 1)[0])
    return out


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
