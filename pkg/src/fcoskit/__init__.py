"""Anchor-free detector label assignment, losses, post-processing and evaluation."""

from .anchors import AnchorConfig, generate_anchors, match
from .assignment import AssignConfig, AssignmentResult, RegTarget, assign, centerness_target, encode
from .geometry import Box, FeatureLevel, Location, ResizeSpec, build_levels, giou, iou, resize
from .ingestion import Annotation, Dataset, Detection, ImageRecord, load_annotations, load_detections
from .losses import LossConfig, focal, giou_loss, total_loss
from .postprocess import PostConfig, decode, fuse, nms, run_pipeline, set_nms

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig", "Annotation", "AssignConfig", "AssignmentResult", "Box", "Dataset", "Detection",
    "FeatureLevel", "ImageRecord", "Location", "LossConfig", "PostConfig", "RegTarget", "ResizeSpec",
    "assign", "build_levels", "centerness_target", "decode", "encode", "focal", "fuse", "generate_anchors",
    "giou", "giou_loss", "iou", "load_annotations", "load_detections", "match", "nms", "resize",
    "run_pipeline", "set_nms", "total_loss",
]
