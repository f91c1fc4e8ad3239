"""Attention-augmented Hough-voting 3D detection on a small numpy autodiff core."""

from .attention import ATTENTION_KINDS, build_attention
from .backbone import Backbone, BackboneConfig
from .boxes import Box3D, Detection, iou_aabb3d, nms_3d
from .metrics import EvalReport, average_precision, evaluate, match_detections
from .model import DetectorConfig, VoteDetector
from .scene import Scene, SceneSpec, generate_scene, load_scene, save_scene
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ATTENTION_KINDS", "Backbone", "BackboneConfig", "Box3D", "Detection", "DetectorConfig",
    "EvalReport", "Scene", "SceneSpec", "Tensor", "VoteDetector", "average_precision",
    "build_attention", "evaluate", "generate_scene", "iou_aabb3d", "load_scene", "match_detections",
    "nms_3d", "no_grad", "precision", "save_scene",
]
