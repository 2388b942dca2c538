"""Teacher-student semi-supervised object detection engine.

Core pieces: a manifest-backed data model, confidence-based pseudo-label
weight policies, a COCO-style AP(50:95) evaluator, a deterministic synthetic
world, a from-scratch trainable reference detector, pipeline orchestration
with resumable rounds, and a subprocess protocol for external detector
backends.
"""

from .annotations import (
    Annotation,
    BoundingBox,
    ClassCatalog,
    Dataset,
    ImageRecord,
    MixedDataset,
    class_distribution,
    concat,
    load_manifest,
    save_manifest,
    split_by_game,
)
from .detector import AnchorConfig, DetectorModel, anchor_grid, compute_loss, match_anchors, predict
from .errors import BackendError, ManifestError, ValidationError
from .evaluation import EvalReport, average_precision, map_50_95, match_detections
from .features import extract_features
from .geometry import Detection, clip, iou, nms
from .pipeline import (
    PipelineConfig,
    PipelineState,
    finetune,
    generate_pseudo_labels,
    grid_search,
    iterate,
    train_student,
    train_teacher,
)
from .policy import WeightPolicy, alpha, apply_policy, assign_status, class_balance_weights
from .trainer import EpochStats, FeatureCache, TrainConfig, evaluate_model, train
from .world import WorldConfig, generate_dataset, generate_scene

__version__ = "0.1.0"

__all__ = [
    "Annotation", "BoundingBox", "ClassCatalog", "Dataset", "ImageRecord", "MixedDataset",
    "class_distribution", "concat", "load_manifest", "save_manifest", "split_by_game",
    "AnchorConfig", "DetectorModel", "anchor_grid", "compute_loss", "match_anchors", "predict",
    "BackendError", "ManifestError", "ValidationError",
    "EvalReport", "average_precision", "map_50_95", "match_detections",
    "extract_features", "Detection", "clip", "iou", "nms",
    "PipelineConfig", "PipelineState", "finetune", "generate_pseudo_labels", "grid_search",
    "iterate", "train_student", "train_teacher",
    "WeightPolicy", "alpha", "apply_policy", "assign_status", "class_balance_weights",
    "EpochStats", "FeatureCache", "TrainConfig", "evaluate_model", "train",
    "WorldConfig", "generate_dataset", "generate_scene",
    "__version__",
]
