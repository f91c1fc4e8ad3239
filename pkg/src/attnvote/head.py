"""Voting, vote clustering, proposal decoding and the detection loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pointops
from . import tensor as T
from .backbone import SeedSet
from .boxes import Box3D, Detection, nms_3d
from .nn import Linear, Module, SharedMLP, make_rng
from .tensor import Tensor


@dataclass
class VoteSet:
    xyz: Tensor
    features: Tensor


@dataclass
class ClusterSet:
    centers: Tensor
    features: Tensor
    indices: np.ndarray


@dataclass
class ProposalSet:
    """Raw per-cluster head outputs for a batch; ``decode`` turns them into detections."""

    centers: Tensor
    objectness: Tensor
    log_size: Tensor
    class_logits: Tensor

    @property
    def count(self) -> int:
        return self.centers.shape[1]


class VoteModule(Module):
    """Each seed predicts an xyz offset and a feature residual from its own feature."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        rng = make_rng(rng)
        self.channels = channels
        self.mlp = SharedMLP(channels, [channels, channels], rng=rng)
        self.out = Linear(channels, 3 + channels, rng=rng)

    def forward(self, seeds: SeedSet) -> VoteSet:
        delta = self.out(self.mlp(seeds.features))
        xyz = T.Tensor(seeds.xyz.astype(delta.dtype)) + delta[..., :3]
        return VoteSet(xyz, seeds.features + delta[..., 3:])


def cluster_votes(votes: VoteSet, p: int, radius: float, nsample: int, mlp: SharedMLP) -> ClusterSet:
    """FPS ``p`` vote centers, ball-group votes around them, shared MLP, max-pool."""
    xyz = votes.xyz.data
    if p > xyz.shape[1]:
        raise ValueError(f"cannot form {p} clusters from {xyz.shape[1]} votes")
    idx = pointops.batched(pointops.farthest_point_sample, xyz, m=p)
    centers = T.gather_points(votes.xyz, idx)
    nb = pointops.batched(pointops.ball_query, centers.data, xyz, radius=radius, k=nsample)
    grouped = pointops.group_features(nb.indices, votes.features, votes.xyz, centers, scale=radius)
    return ClusterSet(centers, T.tmax(mlp(grouped), axis=2), idx)


class ProposalModule(Module):
    def __init__(self, channels: int, num_classes: int, num_proposals: int = 256,
                 radius: float = 0.3, nsample: int = 16, rng=None):
        super().__init__()
        rng = make_rng(rng)
        self.num_classes = num_classes
        self.num_proposals = num_proposals
        self.radius = radius
        self.nsample = nsample
        self.cluster_mlp = SharedMLP(3 + channels, [channels, channels, channels], rng=rng)
        self.mlp = SharedMLP(channels, [channels, channels], rng=rng)
        self.out = Linear(channels, 2 + 3 + 3 + num_classes, rng=rng)

    def forward(self, votes: VoteSet) -> Tuple[ProposalSet, ClusterSet]:
        clusters = cluster_votes(votes, self.num_proposals, self.radius, self.nsample, self.cluster_mlp)
        return propose(clusters, self), clusters


def propose(clusters: ClusterSet, head: ProposalModule) -> ProposalSet:
    raw = head.out(head.mlp(clusters.features))
    return ProposalSet(
        centers=clusters.centers + raw[..., 2:5],
        objectness=raw[..., 0:2],
        log_size=raw[..., 5:8],
        class_logits=raw[..., 8:],
    )


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode(proposals: ProposalSet, anchors: np.ndarray) -> List[List[Detection]]:
    """Per scene: one detection per proposal, sized by its argmax-class anchor."""
    score = _softmax_np(proposals.objectness.data.astype(np.float64))[..., 1]
    labels = proposals.class_logits.data.argmax(axis=-1)
    sizes = np.asarray(anchors)[labels] * np.exp(proposals.log_size.data.astype(np.float64))
    centers = proposals.centers.data.astype(np.float64)
    scenes = []
    for b in range(centers.shape[0]):
        scenes.append([
            Detection(Box3D(centers[b, i], np.maximum(sizes[b, i], 1e-6)), int(labels[b, i]),
                      float(np.clip(score[b, i], 0.0, 1.0)))
            for i in range(centers.shape[1])
        ])
    return scenes


def postprocess(proposals: ProposalSet, anchors: np.ndarray, iou_threshold: float = 0.25) -> List[List[Detection]]:
    return [nms_3d(dets, iou_threshold) for dets in decode(proposals, anchors)]


# -- loss ---------------------------------------------------------------------

@dataclass
class SceneTargets:
    """Ground truth of one scene as arrays: centers (G, 3), sizes (G, 3), labels (G,)."""

    centers: np.ndarray
    sizes: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box3D], labels: Sequence[int]) -> "SceneTargets":
        if not boxes:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        return cls(np.array([b.center for b in boxes], float), np.array([b.size for b in boxes], float),
                   np.asarray(labels, dtype=np.int64))


@dataclass
class LossWeights:
    vote: float = 1.0
    objectness: float = 0.5
    box: float = 1.0
    classification: float = 0.1
    pos_threshold: float = 0.3
    neg_threshold: float = 0.6
    smooth_beta: float = 0.1


def seed_vote_targets(seed_xyz: np.ndarray, targets: Sequence[SceneTargets], tol: float = 1e-4):
    """For every seed inside a GT box: that box's centroid. Returns (targets (B,M,3), mask (B,M))."""
    B, M, _ = seed_xyz.shape
    tgt = np.zeros((B, M, 3))
    mask = np.zeros((B, M), dtype=bool)
    for b, gt in enumerate(targets):
        pts = seed_xyz[b].astype(np.float64)
        # reversed so the first containing box wins
        for g in reversed(range(len(gt.labels))):
            inside = np.all(np.abs(pts - gt.centers[g]) <= gt.sizes[g] / 2 + tol, axis=1)
            tgt[b, inside] = gt.centers[g]
            mask[b] |= inside
    return tgt, mask


def proposal_assignment(centers: np.ndarray, targets: Sequence[SceneTargets], weights: LossWeights):
    """Nearest-GT assignment of cluster centers; labels 1 positive, 0 negative, -1 ignored."""
    B, P, _ = centers.shape
    label = np.zeros((B, P), dtype=np.int64)
    nearest = np.zeros((B, P), dtype=np.int64)
    for b, gt in enumerate(targets):
        if len(gt.labels) == 0:
            continue
        d = np.linalg.norm(centers[b][:, None, :].astype(np.float64) - gt.centers[None], axis=-1)
        nearest[b] = d.argmin(axis=1)
        dmin = d.min(axis=1)
        label[b] = np.where(dmin < weights.pos_threshold, 1, np.where(dmin > weights.neg_threshold, 0, -1))
    return label, nearest


def detection_loss(proposals: ProposalSet, votes: VoteSet, seed_xyz: np.ndarray, cluster_centers: np.ndarray,
                   targets: Sequence[SceneTargets], anchors: np.ndarray,
                   weights: Optional[LossWeights] = None) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of vote, objectness, box and class terms, averaged over the batch."""
    w = weights or LossWeights()
    dtype = proposals.centers.dtype
    B, P, _ = proposals.centers.shape
    K = proposals.class_logits.shape[-1]

    vote_tgt, vote_mask = seed_vote_targets(seed_xyz, targets)
    vm = vote_mask.astype(dtype)[..., None]
    vote_err = T.tabs(votes.xyz - vote_tgt.astype(dtype)) * vm
    vote_loss = vote_err.sum() * (1.0 / max(vote_mask.sum(), 1))

    label, nearest = proposal_assignment(cluster_centers, targets, w)
    valid = label >= 0
    logp_obj = T.log_softmax(proposals.objectness, axis=-1)
    onehot_obj = np.zeros((B, P, 2), dtype=dtype)
    onehot_obj[..., 1] = label == 1
    onehot_obj[..., 0] = label == 0
    obj_loss = -(logp_obj * onehot_obj).sum() * (1.0 / max(valid.sum(), 1))

    pos = label == 1
    npos = max(int(pos.sum()), 1)
    gt_center = np.zeros((B, P, 3), dtype=dtype)
    gt_logsize = np.zeros((B, P, 3), dtype=dtype)
    onehot_cls = np.zeros((B, P, K), dtype=dtype)
    for b, gt in enumerate(targets):
        if len(gt.labels) == 0:
            continue
        g = nearest[b]
        gt_center[b] = gt.centers[g]
        cls = gt.labels[g]
        gt_logsize[b] = np.log(gt.sizes[g] / anchors[cls])
        onehot_cls[b, np.arange(P), cls] = 1.0
    pm = pos.astype(dtype)[..., None]
    center_loss = (T.smooth_l1(proposals.centers - gt_center, w.smooth_beta) * pm).sum() * (1.0 / npos)
    size_loss = (T.smooth_l1(proposals.log_size - gt_logsize, w.smooth_beta) * pm).sum() * (1.0 / npos)
    box_loss = center_loss + size_loss
    logp_cls = T.log_softmax(proposals.class_logits, axis=-1)
    cls_loss = -(logp_cls * (onehot_cls * pm)).sum() * (1.0 / npos)

    total = (vote_loss * w.vote + obj_loss * w.objectness + box_loss * w.box
             + cls_loss * w.classification)
    parts = {
        "total": total.item(),
        "vote": vote_loss.item(),
        "objectness": obj_loss.item(),
        "center": center_loss.item(),
        "size": size_loss.item(),
        "class": cls_loss.item(),
        "positives": float(pos.sum()),
    }
    return total, parts


def mean_vote_distance(vote_xyz: np.ndarray, seed_xyz: np.ndarray, targets: Sequence[SceneTargets]) -> float:
    """Mean distance from each object seed's vote to the nearest GT centroid.

    Object seeds are seeds lying inside a GT box; if a batch has none, every
    vote counts. Scenes without GT are skipped.
    """
    _, mask = seed_vote_targets(seed_xyz, targets)
    dists = []
    for b, gt in enumerate(targets):
        if len(gt.labels) == 0:
            continue
        d = np.linalg.norm(vote_xyz[b][:, None, :].astype(np.float64) - gt.centers[None], axis=-1).min(axis=1)
        dists.append(d[mask[b]] if mask.any() else d)
    if not dists:
        return float("nan")
    return float(np.concatenate(dists).mean())
