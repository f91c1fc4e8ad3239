"""The full detector (backbone + voting + proposals) and its key = value config file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, SeedSet
from .boxes import Detection
from .head import (ClusterSet, ProposalModule, ProposalSet, VoteModule, VoteSet, postprocess)
from .nn import Module, load_store, make_rng, save_store


@dataclass
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 10
    num_proposals: int = 256
    cluster_radius: float = 0.3
    cluster_nsample: int = 16
    nms_iou: float = 0.25
    num_points: int = 20000

    @classmethod
    def toy(cls, attention: str = "none", **overrides) -> "DetectorConfig":
        base = dict(backbone=BackboneConfig.toy(attention), num_proposals=128, num_points=2048)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        self.backbone.validate()
        if self.num_proposals > self.backbone.seed_count:
            raise ValueError("more proposals than seeds")
        if self.num_points < self.backbone.sa_npoints[0]:
            raise ValueError("num_points is smaller than the first SA stage")


# -- config file ----------------------------------------------------------------

_TUPLE_KEYS = {"sa_npoints": int, "sa_radii": float, "sa_nsample": int}
_MLP_KEYS = ("sa_mlps", "fp_mlps")


def _fmt(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(":".join(str(w) for w in m) for m in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_to_text(cfg: DetectorConfig) -> str:
    """Serialize as ``key = value`` lines.

    Tuples are comma separated; MLP width lists use ``a:b:c`` per stage and
    ``;`` between stages.
    """
    lines = ["# attnvote detector config"]
    for f in dataclasses.fields(cfg.backbone):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.backbone, f.name))}")
    for f in dataclasses.fields(cfg):
        if f.name != "backbone":
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: Optional[DetectorConfig] = None) -> DetectorConfig:
    base = base or DetectorConfig()
    bb = dataclasses.asdict(base.backbone)
    top = {f.name: getattr(base, f.name) for f in dataclasses.fields(base) if f.name != "backbone"}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _TUPLE_KEYS:
                bb[key] = tuple(_TUPLE_KEYS[key](v) for v in value.split(","))
            elif key in _MLP_KEYS:
                bb[key] = tuple(tuple(int(w) for w in stage.split(":")) for stage in value.split(";"))
            elif key in ("reduction", "pt_k"):
                bb[key] = int(value)
            elif key == "attention":
                bb[key] = value
            elif key == "normalize_xyz":
                bb[key] = value.lower() in ("1", "true", "yes")
            elif key in ("num_classes", "num_proposals", "cluster_nsample", "num_points"):
                top[key] = int(value)
            elif key in ("cluster_radius", "nms_iou"):
                top[key] = float(value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    cfg = DetectorConfig(backbone=BackboneConfig(**bb), **top)
    cfg.validate()
    return cfg


def load_config(path: Union[str, Path], base: Optional[DetectorConfig] = None) -> DetectorConfig:
    return config_from_text(Path(path).read_text(), base)


def save_config(cfg: DetectorConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(config_to_text(cfg))


# -- model ------------------------------------------------------------------------

@dataclass
class DetectorOutput:
    seeds: SeedSet
    votes: VoteSet
    clusters: ClusterSet
    proposals: ProposalSet


class VoteDetector(Module):
    """Attentional backbone -> votes -> clustered proposals.

    ``anchors`` holds the per-class mean box size (class x 3) used to decode
    log-size predictions; set it from the training scenes.
    """

    def __init__(self, cfg: DetectorConfig, seed=0):
        super().__init__()
        cfg.validate()
        rng = make_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng=rng)
        width = cfg.backbone.seed_width
        self.voting = VoteModule(width, rng=rng)
        self.proposal = ProposalModule(width, cfg.num_classes, cfg.num_proposals,
                                       cfg.cluster_radius, cfg.cluster_nsample, rng=rng)
        self._buffers["anchors"] = np.ones((cfg.num_classes, 3), dtype=np.float64)

    @property
    def anchors(self) -> np.ndarray:
        return self._buffers["anchors"]

    @anchors.setter
    def anchors(self, value) -> None:
        self._buffers["anchors"][...] = value

    def forward(self, points) -> DetectorOutput:
        seeds = self.backbone(points)
        votes = self.voting(seeds)
        proposals, clusters = self.proposal(votes)
        return DetectorOutput(seeds, votes, clusters, proposals)

    def detect(self, points) -> List[List[Detection]]:
        """Eval-mode inference with NMS; one detection list per scene in the batch."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self(points)
        finally:
            self.train(was)
        return postprocess(out.proposals, self.anchors, self.cfg.nms_iou)

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_config(self.cfg, directory / "model.cfg")
        save_store(directory / "params.patd", self.state_dict())

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "VoteDetector":
        directory = Path(directory)
        model = cls(load_config(directory / "model.cfg"))
        model.load_state_dict(load_store(directory / "params.patd"))
        return model
