"""Attention blocks designed for point clouds."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..nn import Linear, SharedMLP, SharedMlpSpec, make_rng
from ..pointops import batched, knn
from .base import AttentionConfig, AttentionModule, projection, scalar_gate, transpose_last


class ASCN(AttentionModule):
    """Shape-context self-attention: ``y = softmax(Q K^T) V + V`` (skip taken from the values)."""

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.query = projection(c, m, rng)
        self.key = projection(c, m, rng)
        self.value = projection(c, c, rng)

    def attend(self, x, coords):
        q, k, v = self.query(x), self.key(x), self.value(x)
        a = self._keep(T.softmax(q @ transpose_last(k), axis=-1))
        return a @ v + v


class PointAttention(AttentionModule):
    """Global point self-attention with an input skip: ``y = x + softmax(Q K^T) V``."""

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.query = projection(c, m, rng)
        self.key = projection(c, m, rng)
        self.value = projection(c, c, rng)

    def attend(self, x, coords):
        q, k, v = self.query(x), self.key(x), self.value(x)
        a = self._keep(T.softmax(q @ transpose_last(k), axis=-1))
        return x + a @ v


class ChannelAffinity(AttentionModule):
    """Channel affinity attention.

    Comparator: per-point MLPs give Q, K (N x C); the channel similarity is
    ``S = Q^T K / N``. Estimator: ``R = softmax(rowmax(S) - S)`` so that
    dissimilar channels get more weight. ``y = x + gate * x R^T``.
    """

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c = cfg.channels
        self.query = projection(c, c, rng, act=True)
        self.key = projection(c, c, rng, act=True)
        self.gate = scalar_gate()
        self.last_similarity = None

    def similarity(self, x):
        n = x.shape[1]
        return (transpose_last(self.query(x)) @ self.key(x)) * (1.0 / n)

    def attend(self, x, coords):
        s = self.similarity(x)
        if self.record_maps:
            self.last_similarity = s.data.copy()
        r = self._keep(T.softmax(T.tmax(s, axis=-1, keepdims=True) - s, axis=-1))
        return x + self.gate * (x @ transpose_last(r))


class OffsetAttention(AttentionModule):
    """Offset-attention: refine the offset between the input and its attention features.

    The map is softmax-normalized over keys, then L1-normalized over queries
    (``dual_norm``); ``y = x + MLP(x - A V)``.
    """

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.query = projection(c, m, rng)
        self.key = projection(c, m, rng)
        self.value = projection(c, c, rng)
        self.refine = projection(c, c, rng, act=True)

    def attention(self, x):
        q, k = self.query(x), self.key(x)
        att = T.softmax(q @ transpose_last(k), axis=-1)
        if not self.cfg.dual_norm:
            return att
        # columns index the output point after the query-axis normalization
        att = att / (att.sum(axis=1, keepdims=True) + 1e-9)
        return transpose_last(att)

    def attend(self, x, coords):
        a = self._keep(self.attention(x))
        f = a @ self.value(x)
        return x + self.refine(x - f)


class PointTransformer(AttentionModule):
    """Vector self-attention over each point's k nearest neighbors.

    ``w_ij = softmax_j(gamma(phi(x_i) - psi(x_j) + delta_ij))`` with
    ``delta_ij = theta(p_i - p_j)``, and
    ``y_i = x_i + sum_j w_ij * (alpha(x_j) + delta_ij)``.
    """

    uses_coords = True

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.phi = Linear(c, c, rng=rng)
        self.psi = Linear(c, c, rng=rng)
        self.alpha = Linear(c, c, rng=rng)
        self.pos = SharedMLP(3, SharedMlpSpec([c, c], [True, False], [True, False]), rng=rng)
        self.gamma = SharedMLP(c, SharedMlpSpec([m, c], [True, False], [True, False]), rng=rng)

    def neighbors(self, coords: np.ndarray) -> np.ndarray:
        return batched(knn, coords, coords, k=self.cfg.k).indices

    def attend(self, x, coords):
        if coords is None:
            raise ValueError("point transformer needs point coordinates")
        coords = np.asarray(coords.data if isinstance(coords, T.Tensor) else coords)
        B, N, C = x.shape
        if coords.shape != (B, N, 3):
            raise ValueError(f"coordinates {coords.shape} do not match features {x.shape}")
        if self.cfg.k > N:
            raise ValueError(f"k={self.cfg.k} exceeds the {N} available points")
        idx = self.neighbors(coords)
        rel = coords[:, :, None, :] - coords[np.arange(B)[:, None, None], idx]
        delta = self.pos(T.Tensor(rel.astype(x.dtype)))
        q = T.reshape(self.phi(x), (B, N, 1, C))
        kj = T.gather_points(self.psi(x), idx)
        vj = T.gather_points(self.alpha(x), idx)
        w = self._keep(T.softmax(self.gamma(q - kj + delta), axis=2))
        return x + (w * (vj + delta)).sum(axis=2)
