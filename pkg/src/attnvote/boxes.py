"""Axis-aligned 3D boxes, detections and box overlap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("a box has a 3D center and a 3D size")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def contains(self, points: np.ndarray, tol: float = 1e-4) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.lo - tol) & (pts <= self.hi + tol), axis=-1)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    label: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou_aabb3d(a: Box3D, b: Box3D) -> float:
    overlap = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(centers_a, sizes_a, centers_b, sizes_b) -> np.ndarray:
    """Pairwise IoU of two box sets given as (n, 3) center and size arrays."""
    ca, sa = np.asarray(centers_a, float).reshape(-1, 3), np.asarray(sizes_a, float).reshape(-1, 3)
    cb, sb = np.asarray(centers_b, float).reshape(-1, 3), np.asarray(sizes_b, float).reshape(-1, 3)
    lo = np.maximum((ca - sa / 2)[:, None], (cb - sb / 2)[None])
    hi = np.minimum((ca + sa / 2)[:, None], (cb + sb / 2)[None])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    union = np.prod(sa, axis=1)[:, None] + np.prod(sb, axis=1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def boxes_to_arrays(boxes: Sequence[Box3D]):
    if not boxes:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return (np.array([b.center for b in boxes], dtype=float),
            np.array([b.size for b in boxes], dtype=float))


def nms_3d(detections: Sequence[Detection], iou_threshold: float = 0.25) -> List[Detection]:
    """Greedy same-class suppression in order of descending score.

    A box is dropped when its IoU with an already kept box of the same class
    reaches ``iou_threshold``. Equal scores keep their input order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("NMS threshold must lie in (0, 1)")
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    dets = [detections[i] for i in order]
    centers, sizes = boxes_to_arrays([d.box for d in dets])
    labels = np.array([d.label for d in dets])
    ious = iou_matrix(centers, sizes, centers, sizes)
    alive = np.ones(len(dets), dtype=bool)
    kept = []
    for i in range(len(dets)):
        if not alive[i]:
            continue
        kept.append(dets[i])
        alive &= ~((labels == labels[i]) & (ious[i] >= iou_threshold))
    return kept
