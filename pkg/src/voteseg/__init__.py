"""voteseg: vote-driven 3D instance segmentation on point clouds.

Points vote for their object's center, votes are grouped into scored
proposals, a graph network consolidates neighboring proposals, and
density clustering over the survivors assembles the final objects from
their pooled foreground masks.

The subpackages stay importable on their own; this namespace re-exports
the pieces most sessions start from.
"""

from .model import ModelConfig, Network
from .scene import (
    BOX,
    CLASS_NAMES,
    CYLINDER,
    FLOOR,
    NUM_CLASSES,
    OBJECT_CLASSES,
    SPHERE,
    WALL,
    Scene,
    SceneGenParams,
    augment,
    crop,
    generate_scene,
    load_scene,
    save_scene,
)
from .training import TrainConfig, infer, infer_upstream, finalize, train
from .metrics import DetectionRecord, GroundTruthObject, evaluate, fit_box, gt_objects

__version__ = "0.1.0"

__all__ = [
    "BOX",
    "CLASS_NAMES",
    "CYLINDER",
    "DetectionRecord",
    "FLOOR",
    "GroundTruthObject",
    "ModelConfig",
    "NUM_CLASSES",
    "Network",
    "OBJECT_CLASSES",
    "SPHERE",
    "Scene",
    "SceneGenParams",
    "TrainConfig",
    "WALL",
    "augment",
    "crop",
    "evaluate",
    "finalize",
    "fit_box",
    "generate_scene",
    "gt_objects",
    "infer",
    "infer_upstream",
    "load_scene",
    "save_scene",
    "train",
]
