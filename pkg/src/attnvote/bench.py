"""Latency and transient-allocation microbenchmark for the attention blocks."""

from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .attention import REGISTRY, build_attention


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    n: int
    c: int
    median_ms: float
    q25_ms: float
    q75_ms: float
    peak_bytes: int

    @property
    def iqr_ms(self) -> float:
        return self.q75_ms - self.q25_ms

    def row(self) -> str:
        return (f"{self.kind}\t{self.n}\t{self.c}\t{self.median_ms:.3f}\t{self.iqr_ms:.3f}"
                f"\t{self.peak_bytes}")


HEADER = "kind\tN\tC\tmedian_ms\tiqr_ms\tpeak_bytes"


def peak_allocation(fn) -> int:
    """Bytes allocated above the starting level at the high-water mark of ``fn()``.

    numpy reports its buffers to tracemalloc, so this counts array storage
    made during the call and nothing the OS allocator does behind it.
    """
    gc.collect()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        fn()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        if started:
            tracemalloc.stop()
    return max(int(peak - base), 0)


def bench_attention(kind: str, n_list: Sequence[int], c: int = 256, repetitions: int = 20,
                    warmup: int = 3, reduction: int = 8, k: int = 16, seed: int = 0) -> List[BenchRecord]:
    """Eval-mode forwards on random (1, N, C) input, one record per N."""
    if kind not in REGISTRY:
        raise ValueError(f"unknown attention kind {kind!r}; choose from {sorted(REGISTRY)}")
    if repetitions < 1:
        raise ValueError("need at least one timed repetition")
    rng = np.random.default_rng(seed)
    block = build_attention(kind, c, reduction, k, rng=rng)
    block.eval()
    records = []
    for n in n_list:
        x = T.Tensor(rng.standard_normal((1, n, c)).astype(np.float32))
        xyz = rng.random((1, n, 3)).astype(np.float32)

        def forward():
            with T.no_grad():
                return block(x, coords=xyz if block.uses_coords else None)

        for _ in range(warmup):
            forward()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            forward()
            times.append((time.perf_counter() - t0) * 1e3)
        q25, med, q75 = np.percentile(times, [25, 50, 75])
        records.append(BenchRecord(kind, int(n), int(c), float(med), float(q25), float(q75),
                                   peak_allocation(forward)))
    return records
