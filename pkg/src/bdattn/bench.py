"""Wall-clock comparison of the baseline and fused key projections.

Timing uses the monotonic clock and reports the median of at least five
repetitions after at least two warmup runs (the first warmup also absorbs
JIT compilation). Results go to CSV together with the exact FLOP ratio
d / (d - d_h) so measured speedups can be plotted against the theoretical
line.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import tensor as T
from .attention import fused_kv_proj
from .decompose import Tag
from .tensor import Precision, Rng, rand_gaussian

CSV_COLUMNS = (
    "operator",
    "seq_len",
    "d",
    "d_h",
    "n_heads",
    "precision",
    "threads",
    "median_ns",
    "tokens_per_sec",
    "speedup",
    "flop_ratio",
)

BASELINE_OPERATOR = "k_proj_baseline"
FUSED_OPERATOR = "k_proj_bda_fused"

MIN_REPS = 5
MIN_WARMUP = 2

# Doubling sweep used by the reference throughput tables.
DEFAULT_SEQ_LENS = tuple(64 * 2**i for i in range(11))  # 64 .. 65536


@dataclass(frozen=True)
class BenchRecord:
    operator: str
    seq_len: int
    d: int
    d_h: int
    n_heads: int
    precision: Precision
    threads: int
    reps: int
    warmup_reps: int
    median_ns: int
    tokens_per_sec: float
    speedup_vs_baseline: float
    flop_ratio: float

    def __post_init__(self):
        if self.reps < MIN_REPS:
            raise ValueError(f"need at least {MIN_REPS} reps, got {self.reps}")
        if self.warmup_reps < MIN_WARMUP:
            raise ValueError(f"need at least {MIN_WARMUP} warmup reps, got {self.warmup_reps}")

    def csv_row(self) -> list[str]:
        return [
            self.operator,
            str(self.seq_len),
            str(self.d),
            str(self.d_h),
            str(self.n_heads),
            self.precision.value,
            str(self.threads),
            str(self.median_ns),
            f"{self.tokens_per_sec:.6g}",
            f"{self.speedup_vs_baseline:.4f}",
            f"{self.flop_ratio:.4f}",
        ]


def time_operator_ns(fn: Callable[[], object], reps: int = MIN_REPS, warmup: int = MIN_WARMUP) -> int:
    """Median wall time of fn() in nanoseconds over reps, after warmup runs."""
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} reps, got {reps}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"need at least {MIN_WARMUP} warmup reps, got {warmup}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    samples.sort()
    return samples[len(samples) // 2]


def kv_proj_benchmark(
    d: int,
    d_h: int,
    n_heads: int,
    seq_lens: Sequence[int],
    precision: Precision = Precision.P64,
    reps: int = MIN_REPS,
    warmup: int = MIN_WARMUP,
    seed: int = 0,
    threads: int = 1,
) -> list[BenchRecord]:
    """Time X @ W_k against the fused projection on identical inputs.

    Timing depends only on shapes, so the weight and coefficient contents
    are random draws rather than a prepared model.
    """
    if d_h >= d:
        raise ValueError(f"d_h ({d_h}) must be < d ({d})")
    T.set_thread_count(threads)
    rng = Rng(seed)
    width = n_heads * d_h
    w_k = rand_gaussian(rng, d, width, precision)
    c = rand_gaussian(rng, d - d_h, width, precision)
    records: list[BenchRecord] = []
    for seq_len in seq_lens:
        x = rand_gaussian(rng, seq_len, d, precision)
        base_ns = time_operator_ns(lambda: T.matmul(x, w_k), reps, warmup)
        fused_ns = time_operator_ns(
            lambda: fused_kv_proj(x, c, d_h, n_heads, Tag.FIRST), reps, warmup
        )
        common = dict(
            seq_len=seq_len,
            d=d,
            d_h=d_h,
            n_heads=n_heads,
            precision=precision,
            threads=threads,
            reps=reps,
            warmup_reps=warmup,
        )
        records.append(
            BenchRecord(
                operator=BASELINE_OPERATOR,
                median_ns=base_ns,
                tokens_per_sec=seq_len / (base_ns * 1e-9),
                speedup_vs_baseline=1.0,
                flop_ratio=1.0,
                **common,
            )
        )
        records.append(
            BenchRecord(
                operator=FUSED_OPERATOR,
                median_ns=fused_ns,
                tokens_per_sec=seq_len / (fused_ns * 1e-9),
                speedup_vs_baseline=base_ns / fused_ns,
                flop_ratio=d / (d - d_h),
                **common,
            )
        )
    return records


def write_csv(path, records: Sequence[BenchRecord]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(rec.csv_row())
