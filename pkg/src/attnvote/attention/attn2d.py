"""Image attention blocks carried over to point sets by treating an N-point cloud as an N x 1 image."""

from __future__ import annotations

from .. import tensor as T
from ..nn import Linear, SharedMLP, SharedMlpSpec, make_rng
from .base import AttentionConfig, AttentionModule, projection, scalar_gate, transpose_last


class NonLocal(AttentionModule):
    """Embedded-Gaussian non-local block: ``y = x + W_z(softmax(Q K^T) V)``.

    The value path is reduced to C/r and lifted back by ``W_z``, whose BN
    scale starts at zero so the block is the identity when inserted.
    """

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.theta = projection(c, m, rng)
        self.phi = projection(c, m, rng)
        self.g = projection(c, m, rng)
        self.w_z = projection(m, c, rng)
        self.w_z.zero_output()

    def attend(self, x, coords):
        q, k, v = self.theta(x), self.phi(x), self.g(x)
        a = self._keep(T.softmax(q @ transpose_last(k), axis=-1))
        return x + self.w_z(a @ v)


class CrissCross(AttentionModule):
    """Criss-cross attention on an N x 1 grid.

    A position's criss-cross path is its whole column plus its one-element
    row, so a single pass is a softmax over all N points with the self
    term counted once. ``gamma`` gates the residual and starts at zero.
    """

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.query = projection(c, m, rng)
        self.key = projection(c, m, rng)
        self.value = projection(c, c, rng)
        self.gamma = scalar_gate()

    def attend(self, x, coords):
        q, k, v = self.query(x), self.key(x), self.value(x)
        a = self._keep(T.softmax(q @ transpose_last(k), axis=-1))
        return x + self.gamma * (a @ v)


class SqueezeExcite(AttentionModule):
    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        self.fc1 = Linear(cfg.channels, cfg.reduced, rng=rng)
        self.fc2 = Linear(cfg.reduced, cfg.channels, rng=rng)

    def attend(self, x, coords):
        s = T.mean(x, axis=1, keepdims=True)
        e = self._keep(T.sigmoid(self.fc2(T.relu(self.fc1(s)))))
        return x * e


class CBAM(AttentionModule):
    """Channel gate then spatial gate, applied in sequence.

    The spatial gate sees the per-point channel mean and max; the 7x7 conv
    of the image version becomes a 2 -> 1 shared MLP with BN.
    """

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        self.fc1 = Linear(cfg.channels, cfg.reduced, rng=rng)
        self.fc2 = Linear(cfg.reduced, cfg.channels, rng=rng)
        self.spatial = SharedMLP(2, SharedMlpSpec([1], [True], [False]), rng=rng)
        self.last_spatial = None

    def _mlp(self, s):
        return self.fc2(T.relu(self.fc1(s)))

    def attend(self, x, coords):
        avg = T.mean(x, axis=1, keepdims=True)
        mx = T.tmax(x, axis=1, keepdims=True)
        mc = self._keep(T.sigmoid(self._mlp(avg) + self._mlp(mx)))
        x1 = x * mc
        pooled = T.concat([T.mean(x1, axis=-1, keepdims=True), T.tmax(x1, axis=-1, keepdims=True)], axis=-1)
        ms = T.sigmoid(self.spatial(pooled))
        if self.record_maps:
            self.last_spatial = ms.data.copy()
        return x1 * ms


class DualAttention(AttentionModule):
    """Position branch (non-local style, gate ``alpha``) plus channel branch (gate ``beta``)."""

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__(cfg)
        rng = make_rng(rng)
        c, m = cfg.channels, cfg.reduced
        self.query = projection(c, m, rng)
        self.key = projection(c, m, rng)
        self.value = projection(c, c, rng)
        self.alpha = scalar_gate()
        self.beta = scalar_gate()
        self.last_channel_map = None

    def position(self, x):
        q, k, v = self.query(x), self.key(x), self.value(x)
        a = self._keep(T.softmax(q @ transpose_last(k), axis=-1))
        return a @ v

    def channel(self, x):
        a = T.softmax(transpose_last(x) @ x, axis=-1)
        if self.record_maps:
            self.last_channel_map = a.data.copy()
        return x @ transpose_last(a)

    def attend(self, x, coords):
        return x + self.alpha * self.position(x) + self.beta * self.channel(x)
