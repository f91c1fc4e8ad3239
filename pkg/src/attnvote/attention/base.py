from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import tensor as T
from ..nn import Module, Parameter, SharedMLP, SharedMlpSpec, SeedLike
from ..tensor import Tensor


@dataclass
class AttentionConfig:
    channels: int
    reduction: int = 8
    k: int = 16
    dual_norm: bool = True

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError("reduction factor must be >= 1")
        if self.channels < 1 or self.channels % self.reduction:
            raise ValueError(f"channels {self.channels} not divisible by reduction {self.reduction}")

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction


def projection(cin: int, cout: int, rng: SeedLike, act: bool = False) -> SharedMLP:
    """Single 1x1-conv + BN layer used for query/key/value maps."""
    return SharedMLP(cin, SharedMlpSpec([cout], [True], [act]), rng=rng)


def scalar_gate() -> Parameter:
    return Parameter(np.zeros(1))


class AttentionModule(Module):
    """Uniform contract: features (N, C) or (B, N, C) in, same shape out.

    Subclasses implement ``attend`` on batched input. Set ``record_maps`` to
    keep the most recent attention map in ``last_map`` for inspection.
    """

    uses_coords = False

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.record_maps = False
        self.last_map: Optional[np.ndarray] = None

    def forward(self, x, coords=None) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.cfg.channels:
            raise ValueError(f"{type(self).__name__} expects {self.cfg.channels} channels, got {x.shape[-1]}")
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
            if coords is not None:
                coords = np.asarray(coords)[None]
        y = self.attend(x, coords)
        return T.reshape(y, y.shape[1:]) if squeeze else y

    def attend(self, x: Tensor, coords) -> Tensor:
        raise NotImplementedError

    def _keep(self, a: Tensor) -> Tensor:
        if self.record_maps:
            self.last_map = a.data.copy()
        return a


def transpose_last(x: Tensor) -> Tensor:
    return x.swapaxes(-1, -2)
