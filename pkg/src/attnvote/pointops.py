"""Order-independent point-set primitives: sampling, neighborhoods, grouping, interpolation.

Index selection runs on plain numpy coordinates (it is not differentiated);
only the feature gathers are tensor ops. Distance ties always resolve to the
lowest source index so every function is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

_CHUNK = 512


@dataclass
class NeighborIndex:
    """Fixed fan-out neighbor lists.

    ``indices`` is (..., M, K). Rows with fewer than K hits repeat their
    first valid neighbor; ``padded`` marks those rows and ``counts`` holds the
    number of genuine hits (0 when the nearest-point fallback was used).
    """

    indices: np.ndarray
    padded: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point set is empty")
    return pts


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


def farthest_point_sample(points, m: int, start: Optional[int] = 0,
                          seed: Optional[int] = None) -> np.ndarray:
    """Greedy max-min sampling of ``m`` indices.

    The first pick is ``start`` (index 0 by default); pass ``start=None`` with
    a ``seed`` for a random first pick. Later picks maximize the distance to
    the chosen set, ties going to the lowest index.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(m):
        chosen[i] = cur
        d = pts - pts[cur]
        np.minimum(mind, np.einsum("nd,nd->n", d, d), out=mind)
        mind[cur] = -1.0
        if i + 1 < m:
            cur = int(np.argmax(mind))
    return chosen


def ball_query(centers, points, radius: float, k: int) -> NeighborIndex:
    """Up to ``k`` source indices strictly within ``radius`` of each center, in index order.

    A center with no hit borrows its single nearest source point.
    """
    if radius <= 0 or k < 1:
        raise ValueError("ball query needs radius > 0 and k >= 1")
    ctr, pts = _as_points(centers), _as_points(points)
    m = ctr.shape[0]
    idx = np.zeros((m, k), dtype=np.int64)
    counts = np.zeros(m, dtype=np.int64)
    r2 = radius * radius
    for lo in range(0, m, _CHUNK):
        d = _sqdist(ctr[lo:lo + _CHUNK], pts)
        mask = d < r2
        rank = np.cumsum(mask, axis=1)
        keep = mask & (rank <= k)
        rows, cols = np.nonzero(keep)
        idx[lo + rows, rank[rows, cols] - 1] = cols
        counts[lo:lo + _CHUNK] = np.minimum(rank[:, -1], k)
        empty = counts[lo:lo + _CHUNK] == 0
        if empty.any():
            idx[lo + np.flatnonzero(empty), 0] = np.argmin(d[empty], axis=1)
    filled = np.maximum(counts, 1)
    slot = np.arange(k)[None, :]
    idx = np.where(slot < filled[:, None], idx, idx[:, :1])
    return NeighborIndex(idx, counts < k, counts)


def knn(queries, points, k: int) -> NeighborIndex:
    """The ``k`` nearest sources of each query, nearest first, ties to the lower index."""
    q, pts = _as_points(queries), _as_points(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for lo in range(0, q.shape[0], _CHUNK):
        d = _sqdist(q[lo:lo + _CHUNK], pts)
        out[lo:lo + _CHUNK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return NeighborIndex(out, np.zeros(q.shape[0], dtype=bool), np.full(q.shape[0], k))


def group_features(neighbors: np.ndarray, features: Optional[Tensor], coords, centers,
                   scale: float = 1.0) -> Tensor:
    """Stack ``[(p_j - c) / scale, f_j]`` for every neighbor j of every center.

    ``neighbors`` is (B, M, K); ``coords`` (B, N, 3) and ``centers`` (B, M, 3)
    may be tensors (so gradients reach vote positions) or arrays; ``features``
    is (B, N, C) or None. Returns (B, M, K, 3 + C).
    """
    neighbors = np.asarray(neighbors)
    dtype = features.dtype if features is not None else T.get_default_dtype()
    if not isinstance(coords, Tensor):
        coords = Tensor(np.asarray(coords, dtype=dtype))
    centers = T.as_tensor(centers, like=coords)
    B, M, K = neighbors.shape
    if centers.shape[:2] != (B, M):
        raise ValueError("center and neighbor-list extents differ")
    rel = T.gather_points(coords, neighbors) - T.reshape(centers, (B, M, 1, 3))
    if scale != 1.0:
        rel = rel * (1.0 / scale)
    if features is None:
        return rel
    grouped = T.gather_points(features, neighbors)
    return T.concat([rel, grouped], axis=-1)


def three_nn_weights(target, source) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of (up to) the three nearest sources and inverse-distance weights summing to 1."""
    tgt, src = _as_points(target), _as_points(source)
    k = min(3, src.shape[0])
    idx = np.empty((tgt.shape[0], k), dtype=np.int64)
    w = np.empty((tgt.shape[0], k))
    for lo in range(0, tgt.shape[0], _CHUNK):
        d = _sqdist(tgt[lo:lo + _CHUNK], src)
        near = np.argsort(d, axis=1, kind="stable")[:, :k]
        dist = np.sqrt(np.take_along_axis(d, near, axis=1))
        recip = 1.0 / (dist + 1e-8)
        idx[lo:lo + _CHUNK] = near
        w[lo:lo + _CHUNK] = recip / recip.sum(axis=1, keepdims=True)
    return idx, w


def three_nn_interpolate(target, source, features: Tensor) -> Tensor:
    """Inverse-distance blend of the three nearest source features at each target point.

    Batched: ``target`` (B, n, 3), ``source`` (B, m, 3), ``features`` (B, m, C).
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    source = np.asarray(source.data if isinstance(source, Tensor) else source)
    pairs = [three_nn_weights(t, s) for t, s in zip(target, source)]
    idx = np.stack([p[0] for p in pairs])
    w = np.stack([p[1] for p in pairs]).astype(features.dtype)
    gathered = T.gather_points(features, idx)
    return (gathered * w[..., None]).sum(axis=2)


def batched(fn, *arrays, **kwargs):
    """Apply a single-scene index function across the leading batch axis."""
    results = [fn(*(a[b] for a in arrays), **kwargs) for b in range(len(arrays[0]))]
    if isinstance(results[0], NeighborIndex):
        return NeighborIndex(np.stack([r.indices for r in results]),
                             np.stack([r.padded for r in results]),
                             np.stack([r.counts for r in results]))
    return np.stack(results)
