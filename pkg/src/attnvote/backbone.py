"""PointNet++ encoder/decoder with an attention block after every SA and FP stage."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import pointops
from . import tensor as T
from .attention import ATTENTION_KINDS, build_attention
from .nn import Module, SharedMLP, make_rng
from .tensor import Tensor


@dataclass
class BackboneConfig:
    sa_npoints: Tuple[int, ...] = (2048, 1024, 512, 256)
    sa_radii: Tuple[float, ...] = (0.2, 0.4, 0.8, 1.2)
    sa_nsample: Tuple[int, ...] = (64, 32, 16, 16)
    sa_mlps: Tuple[Tuple[int, ...], ...] = ((64, 64, 128), (128, 128, 256), (128, 128, 256), (128, 128, 256))
    fp_mlps: Tuple[Tuple[int, ...], ...] = ((256, 256), (256, 256))
    attention: str = "none"
    reduction: int = 8
    pt_k: int = 16
    normalize_xyz: bool = True

    def __post_init__(self):
        self.sa_npoints = tuple(int(v) for v in self.sa_npoints)
        self.sa_radii = tuple(float(v) for v in self.sa_radii)
        self.sa_nsample = tuple(int(v) for v in self.sa_nsample)
        self.sa_mlps = tuple(tuple(int(w) for w in m) for m in self.sa_mlps)
        self.fp_mlps = tuple(tuple(int(w) for w in m) for m in self.fp_mlps)
        self.validate()

    def validate(self) -> None:
        if not (len(self.sa_npoints) == len(self.sa_radii) == len(self.sa_nsample) == len(self.sa_mlps) == 4):
            raise ValueError("the backbone has exactly four SA stages")
        if len(self.fp_mlps) != 2:
            raise ValueError("the backbone has exactly two FP stages")
        if any(a <= b for a, b in zip(self.sa_npoints, self.sa_npoints[1:])):
            raise ValueError(f"SA point counts must strictly decrease: {self.sa_npoints}")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        for w in self.stage_widths():
            if w % self.reduction:
                raise ValueError(f"stage width {w} is not divisible by reduction {self.reduction}")
        if self.attention == "point_transformer":
            smallest = min(self.sa_npoints)
            if self.pt_k > smallest:
                raise ValueError(f"pt_k={self.pt_k} exceeds the smallest stage ({smallest} points)")

    def stage_widths(self) -> List[int]:
        """Feature widths seen by the six attention insertions (4 SA, then 2 FP)."""
        return [m[-1] for m in self.sa_mlps] + [m[-1] for m in self.fp_mlps]

    @property
    def seed_count(self) -> int:
        return self.sa_npoints[1]

    @property
    def seed_width(self) -> int:
        return self.fp_mlps[-1][-1]

    @classmethod
    def toy(cls, attention: str = "none", **overrides) -> "BackboneConfig":
        base = dict(
            sa_npoints=(256, 128, 64, 32),
            sa_radii=(0.2, 0.4, 0.8, 1.2),
            sa_nsample=(32, 16, 8, 8),
            sa_mlps=((16, 16, 32), (32, 32, 32), (32, 32, 32), (32, 32, 32)),
            fp_mlps=((32, 32), (32, 32)),
            attention=attention,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class SeedSet:
    xyz: np.ndarray
    features: Tensor

    @property
    def count(self) -> int:
        return self.xyz.shape[-2]


class SetAbstraction(Module):
    """FPS centers, ball-query groups, shared MLP on ``[rel_xyz, feats]``, max over each group."""

    def __init__(self, npoint: int, radius: float, nsample: int, cin: int, widths: Sequence[int],
                 normalize_xyz: bool = True, rng=None):
        super().__init__()
        self.npoint = npoint
        self.radius = radius
        self.nsample = nsample
        self.cin = cin
        self.normalize_xyz = normalize_xyz
        self.mlp = SharedMLP(3 + cin, list(widths), rng=rng)

    def forward(self, xyz: np.ndarray, features: Optional[Tensor]):
        B, N, _ = xyz.shape
        if N < self.npoint:
            raise ValueError(f"SA stage needs at least {self.npoint} points, got {N}")
        centers_idx = pointops.batched(pointops.farthest_point_sample, xyz, m=self.npoint)
        new_xyz = np.take_along_axis(xyz, centers_idx[..., None], axis=1)
        nb = pointops.batched(pointops.ball_query, new_xyz, xyz, radius=self.radius, k=self.nsample)
        scale = self.radius if self.normalize_xyz else 1.0
        grouped = pointops.group_features(nb.indices, features, xyz, new_xyz, scale=scale)
        return new_xyz, T.tmax(self.mlp(grouped), axis=2), centers_idx


class FeaturePropagation(Module):
    """Interpolate coarse features onto the fine points, concatenate skip features, shared MLP."""

    def __init__(self, cin: int, widths: Sequence[int], rng=None):
        super().__init__()
        self.cin = cin
        self.mlp = SharedMLP(cin, list(widths), rng=rng)

    def forward(self, fine_xyz: np.ndarray, coarse_xyz: np.ndarray, fine_feats: Optional[Tensor],
                coarse_feats: Tensor) -> Tensor:
        interp = pointops.three_nn_interpolate(fine_xyz, coarse_xyz, coarse_feats)
        x = interp if fine_feats is None else T.concat([interp, fine_feats], axis=-1)
        if x.shape[-1] != self.cin:
            raise ValueError(f"FP stage expects {self.cin} channels, got {x.shape[-1]}")
        return self.mlp(x)


_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def point_hash(xyz: np.ndarray) -> np.ndarray:
    """FNV-1a over the raw coordinate bytes of each point (N, 3) -> (N,) uint64."""
    raw = np.ascontiguousarray(xyz).view(np.uint8).reshape(len(xyz), -1).astype(np.uint64)
    h = np.full(len(xyz), _FNV_OFFSET, dtype=np.uint64)
    for col in raw.T:
        h = (h ^ col) * _FNV_PRIME
    return h


def canonical_order(xyz: np.ndarray) -> np.ndarray:
    """Per-scene order that depends only on the point set, not on the input order.

    Sorting by coordinate hash rather than lexicographically keeps storage
    order spatially scattered, so the first-k rule of ball query still
    samples the whole ball instead of its low-x edge.
    """
    return np.stack([np.lexsort((s[:, 2], s[:, 1], s[:, 0], point_hash(s))) for s in xyz])


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng=None):
        super().__init__()
        rng = make_rng(rng)
        self.cfg = cfg
        self.sa = []
        cin = 0
        for npoint, radius, ns, widths in zip(cfg.sa_npoints, cfg.sa_radii, cfg.sa_nsample, cfg.sa_mlps):
            self.sa.append(SetAbstraction(npoint, radius, ns, cin, widths, cfg.normalize_xyz, rng=rng))
            cin = widths[-1]
        w = [m[-1] for m in cfg.sa_mlps]
        self.fp = [
            FeaturePropagation(w[3] + w[2], cfg.fp_mlps[0], rng=rng),
            FeaturePropagation(cfg.fp_mlps[0][-1] + w[1], cfg.fp_mlps[1], rng=rng),
        ]
        # None entries elide the insertion entirely, which is what kind "none" means
        self.attn = [build_attention(cfg.attention, c, cfg.reduction, cfg.pt_k, rng=rng)
                     for c in cfg.stage_widths()]

    def _attend(self, i: int, xyz: np.ndarray, feats: Tensor) -> Tensor:
        block = self.attn[i]
        if block is None:
            return feats
        return block(feats, coords=xyz if block.uses_coords else None)

    def forward(self, points) -> SeedSet:
        xyz = np.asarray(points, dtype=T.get_default_dtype())
        if xyz.ndim == 2:
            xyz = xyz[None]
        if xyz.shape[1] < self.cfg.sa_npoints[0]:
            raise ValueError(f"backbone needs at least {self.cfg.sa_npoints[0]} points, got {xyz.shape[1]}")
        order = canonical_order(xyz)
        xyz = np.take_along_axis(xyz, order[..., None], axis=1)
        stages = [(xyz, None)]
        feats = None
        for i, sa in enumerate(self.sa):
            xyz, feats, _ = sa(xyz, feats)
            feats = self._attend(i, xyz, feats)
            stages.append((xyz, feats))
        (x2, f2), (x3, f3), (x4, f4) = stages[2], stages[3], stages[4]
        feats = self.fp[0](x3, x4, f3, f4)
        feats = self._attend(4, x3, feats)
        feats = self.fp[1](x2, x3, f2, feats)
        feats = self._attend(5, x2, feats)
        return SeedSet(x2, feats)


def build_backbone(cfg: BackboneConfig, seed=0) -> Backbone:
    return Backbone(cfg, rng=seed)


def backbone_forward(backbone: Backbone, points, mode: str = "eval") -> SeedSet:
    backbone.train(mode == "train")
    return backbone(points)
