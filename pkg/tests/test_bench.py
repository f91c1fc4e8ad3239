import numpy as np
import pytest

from attnvote.bench import HEADER, BenchRecord, bench_attention, peak_allocation


def test_record_fields():
    (rec,) = bench_attention("se", [64], c=16, repetitions=5, warmup=1)
    assert rec.kind == "se" and rec.n == 64 and rec.c == 16
    assert rec.median_ms > 0 and rec.q25_ms <= rec.median_ms <= rec.q75_ms
    assert rec.iqr_ms >= 0 and rec.peak_bytes > 0
    assert len(rec.row().split("\t")) == len(HEADER.split("\t"))


def test_invalid_arguments():
    with pytest.raises(ValueError):
        bench_attention("transformer", [8])
    with pytest.raises(ValueError):
        bench_attention("se", [8], repetitions=0)


def test_peak_allocation_counts_numpy_buffers():
    n = 1 << 20
    peak = peak_allocation(lambda: np.ones(n, dtype=np.float64).sum())
    assert n * 8 <= peak < n * 8 * 1.1
    assert peak_allocation(lambda: None) < 4096


def test_point_transformer_gets_coordinates():
    (rec,) = bench_attention("point_transformer", [32], c=16, repetitions=2, warmup=0, k=4)
    assert rec.peak_bytes > 0


def test_allocation_scaling_small():
    # the same laws hold at a small width; the acceptance suite checks the full size
    nl = {r.n: r.peak_bytes for r in bench_attention("nonlocal", [256, 512], c=64, repetitions=2, warmup=1)}
    se = {r.n: r.peak_bytes for r in bench_attention("se", [256, 512], c=64, repetitions=2, warmup=1)}
    assert nl[512] / nl[256] > se[512] / se[256]
    assert 1.6 <= se[512] / se[256] <= 2.4
