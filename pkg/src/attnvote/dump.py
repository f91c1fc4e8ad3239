"""Write a scene's seeds, votes and ground truth to one PLY for an external viewer."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .head import SceneTargets, mean_vote_distance
from .model import VoteDetector
from .scene import Scene, write_ply
from .train import prepare_batch


def _xyz(a: np.ndarray):
    a = np.asarray(a, dtype=np.float32).reshape(-1, 3)
    return {"x": a[:, 0], "y": a[:, 1], "z": a[:, 2]}


def dump_votes(model: VoteDetector, scene: Scene, path: Union[str, Path]) -> float:
    """Elements: ``vertex`` (input), ``seed``, ``vote``, ``centroid`` and ``box``.

    Returns the mean distance from object seeds' votes to the nearest GT centroid.
    """
    batch = prepare_batch([scene], model.cfg.num_points)
    model.eval()
    with T.no_grad():
        seeds = model.backbone(batch.points)
        votes = model.voting(seeds)
    vote_xyz = votes.xyz.data[0]
    targets = SceneTargets.from_boxes(scene.boxes, scene.labels)
    boxes = np.array([b.center + b.size for b in scene.boxes], dtype=np.float32).reshape(-1, 6)
    write_ply(path, {
        "vertex": _xyz(scene.points),
        "seed": _xyz(seeds.xyz[0]),
        "vote": _xyz(vote_xyz),
        "centroid": _xyz(targets.centers),
        "box": {"label": np.asarray(scene.labels, dtype=np.int32),
                **{k: boxes[:, i] for i, k in enumerate(("cx", "cy", "cz", "w", "l", "h"))}},
    })
    return mean_vote_distance(vote_xyz[None], seeds.xyz, [targets])
