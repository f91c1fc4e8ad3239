"""Batching, anchors, the training step and the fit / evaluate loops."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .head import LossWeights, SceneTargets, detection_loss, mean_vote_distance
from .metrics import EvalReport, evaluate
from .model import VoteDetector
from .nn import Adam
from .scene import CLASS_SIZES, Scene, fixed_size

log = logging.getLogger(__name__)


@dataclass
class Batch:
    points: np.ndarray
    targets: List[SceneTargets]


def prepare_batch(scenes: Sequence[Scene], num_points: int, seed: int = 0) -> Batch:
    """Resample every scene to ``num_points`` and stack.

    The subset depends on the scene id and ``seed`` only, so a scene gets the
    same points in training and in evaluation whatever batch it lands in.
    """
    pts = np.stack([fixed_size(s.points, num_points, seed=[seed, zlib.crc32(s.scene_id.encode())])
                    for s in scenes])
    return Batch(pts.astype(np.float32), [SceneTargets.from_boxes(s.boxes, s.labels) for s in scenes])


def compute_anchors(scenes: Sequence[Scene], num_classes: int) -> np.ndarray:
    """Per-class mean box size; classes absent from ``scenes`` fall back to the generator prior."""
    sums = np.zeros((num_classes, 3))
    counts = np.zeros(num_classes)
    for s in scenes:
        for box, c in zip(s.boxes, s.labels):
            sums[c] += box.size
            counts[c] += 1
    prior = np.array([CLASS_SIZES[c % len(CLASS_SIZES)] for c in range(num_classes)], dtype=float)
    return np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], prior)


def _grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params
                             if p.grad is not None)))


def train_step(model: VoteDetector, batch: Batch, optimizer: Adam,
               weights: Optional[LossWeights] = None) -> Dict[str, float]:
    model.train()
    optimizer.zero_grad()
    out = model(batch.points)
    loss, parts = detection_loss(out.proposals, out.votes, out.seeds.xyz, out.clusters.centers.data,
                                 batch.targets, model.anchors, weights)
    loss.backward()
    parts["grad_norm"] = _grad_norm(optimizer.params)
    optimizer.step()
    return parts


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    log_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)


def fit(model: VoteDetector, scenes: Sequence[Scene], cfg: Optional[TrainConfig] = None,
        callback: Optional[Callable[[int, Dict[str, float]], None]] = None) -> List[Dict[str, float]]:
    """Adam at a constant rate over reshuffled mini-batches; returns one loss record per step.

    Anchors are reset from ``scenes`` before the first step. Every scene is
    resampled once up front so the point subset stays fixed across epochs.
    """
    cfg = cfg or TrainConfig()
    if not scenes:
        raise ValueError("no training scenes")
    model.anchors = compute_anchors(scenes, model.cfg.num_classes)
    data = prepare_batch(scenes, model.cfg.num_points, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(scenes))
    order = np.zeros(0, dtype=int)
    history = []
    for step in range(cfg.steps):
        if order.size < bs:
            order = np.concatenate([order, rng.permutation(len(scenes))])
        idx, order = order[:bs], order[bs:]
        batch = Batch(data.points[idx], [data.targets[i] for i in idx])
        parts = train_step(model, batch, opt, cfg.loss_weights)
        history.append(parts)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.4f vote %.4f obj %.4f", step + 1, parts["total"], parts["vote"],
                     parts["objectness"])
        if callback is not None:
            callback(step, parts)
    return history


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


def predict(model: VoteDetector, scenes: Sequence[Scene], batch_size: int = 8, seed: int = 0):
    dets = []
    for chunk in _chunks(list(scenes), batch_size):
        batch = prepare_batch(chunk, model.cfg.num_points, seed=seed)
        dets.extend(model.detect(batch.points))
    return dets


def evaluate_model(model: VoteDetector, scenes: Sequence[Scene], thresholds=(0.25, 0.5),
                   batch_size: int = 8, seed: int = 0) -> EvalReport:
    dets = predict(model, scenes, batch_size, seed)
    gts = [list(zip(s.boxes, s.labels)) for s in scenes]
    names = scenes[0].classes if scenes else None
    return evaluate(dets, gts, thresholds, names)


def vote_distance(model: VoteDetector, scenes: Sequence[Scene], batch_size: int = 8, seed: int = 0) -> float:
    """Eval-mode mean distance from object seeds' votes to the nearest GT centroid."""
    total, count = 0.0, 0
    model.eval()
    for chunk in _chunks(list(scenes), batch_size):
        batch = prepare_batch(chunk, model.cfg.num_points, seed=seed)
        with T.no_grad():
            seeds = model.backbone(batch.points)
            votes = model.voting(seeds)
        d = mean_vote_distance(votes.xyz.data, seeds.xyz, batch.targets)
        if not np.isnan(d):
            total += d * len(chunk)
            count += len(chunk)
    return total / count if count else float("nan")
