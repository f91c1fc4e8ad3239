"""Per-class AP / recall at several IoU thresholds, pooled over scenes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .boxes import Box3D, Detection, boxes_to_arrays, iou_matrix

GroundTruth = Tuple[Box3D, int]


def match_detections(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy matching inside one scene.

    Detections go in descending score order (ties keep input order); each
    takes the highest-IoU still unmatched GT of its class when that IoU
    reaches the threshold. Returns ``(tp flags in input order, matched GT mask)``.
    """
    tp = np.zeros(len(detections), dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)
    if not detections or not gts:
        return tp, taken
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    dc, ds = boxes_to_arrays([d.box for d in detections])
    gc, gs = boxes_to_arrays([g[0] for g in gts])
    ious = iou_matrix(dc, ds, gc, gs)
    glabels = np.array([g[1] for g in gts])
    for i in order:
        cand = np.where((glabels == detections[i].label) & ~taken, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            tp[i] = True
            taken[j] = True
    return tp, taken


def average_precision(tp: Sequence[bool], scores: Sequence[float], gt_count: int) -> float:
    """Area under the non-increasing precision envelope.

    Detections with equal scores form one operating point, so the result
    depends on the ranking only and not on how ties happen to be ordered.
    """
    if gt_count <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    if tp.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp, scores = tp[order], scores[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # last index of every tie group
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    rec = ctp[ends] / gt_count
    prec = ctp[ends] / (ctp[ends] + cfp[ends])
    env = np.maximum.accumulate(prec[::-1])[::-1]
    dr = np.diff(np.r_[0.0, rec])
    return float(np.sum(dr * env))


def recall(matched: int, gt_count: int) -> float:
    if gt_count <= 0:
        raise ValueError("recall is undefined without ground truth")
    return matched / gt_count


@dataclass
class EvalReport:
    """Metrics per IoU threshold. Per-class dicts only hold classes with ground truth."""

    thresholds: Tuple[float, ...]
    class_names: Tuple[str, ...]
    ap: Dict[float, Dict[int, float]] = field(default_factory=dict)
    recall: Dict[float, Dict[int, float]] = field(default_factory=dict)
    gt_counts: Dict[int, int] = field(default_factory=dict)
    pred_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> List[int]:
        return sorted(c for c, n in self.gt_counts.items() if n > 0)

    def mAP(self, t: float) -> float:
        vals = list(self.ap[t].values())
        return float(np.mean(vals)) if vals else 0.0

    def AR(self, t: float) -> float:
        vals = list(self.recall[t].values())
        return float(np.mean(vals)) if vals else 0.0

    def summary(self) -> Dict[str, float]:
        out = {}
        for t in self.thresholds:
            out[f"mAP@{t:g}"] = self.mAP(t)
            out[f"AR@{t:g}"] = self.AR(t)
        return out

    def to_table(self) -> str:
        """Tab-separated: one column per class then the mean; rows AP@t and AR@t."""
        header = ["metric", *self.class_names, "mean"]
        rows = ["\t".join(header)]
        for t in self.thresholds:
            for name, per, mean in (("AP", self.ap[t], self.mAP(t)), ("AR", self.recall[t], self.AR(t))):
                cells = [f"{per[c]:.4f}" if c in per else "-" for c in range(len(self.class_names))]
                rows.append("\t".join([f"{name}@{t:g}", *cells, f"{mean:.4f}"]))
        return "\n".join(rows) + "\n"


def evaluate(detections: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
             thresholds: Sequence[float] = (0.25, 0.5),
             class_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Pool detections over all scenes per class and score them against the GT."""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} scenes")
    thresholds = tuple(float(t) for t in thresholds)
    labels = {g[1] for scene in gts for g in scene} | {d.label for scene in detections for d in scene}
    if class_names is None:
        class_names = tuple(str(c) for c in range(max(labels) + 1)) if labels else ()
    report = EvalReport(thresholds, tuple(class_names))
    for scene in gts:
        for _, c in scene:
            report.gt_counts[c] = report.gt_counts.get(c, 0) + 1
    for scene in detections:
        for d in scene:
            report.pred_counts[d.label] = report.pred_counts.get(d.label, 0) + 1

    for t in thresholds:
        flags: Dict[int, List[bool]] = {}
        scores: Dict[int, List[float]] = {}
        matched: Dict[int, int] = {}
        for dets, scene_gt in zip(detections, gts):
            tp, taken = match_detections(dets, scene_gt, t)
            for d, f in zip(dets, tp):
                flags.setdefault(d.label, []).append(bool(f))
                scores.setdefault(d.label, []).append(d.score)
            for (_, c), hit in zip(scene_gt, taken):
                matched[c] = matched.get(c, 0) + int(hit)
        report.ap[t] = {}
        report.recall[t] = {}
        for c in report.classes:
            report.ap[t][c] = average_precision(flags.get(c, []), scores.get(c, []), report.gt_counts[c])
            report.recall[t][c] = recall(matched.get(c, 0), report.gt_counts[c])
    return report


def write_report(report: EvalReport, path: Union[str, Path]) -> None:
    Path(path).write_text(report.to_table())
