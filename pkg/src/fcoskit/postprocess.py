"""
Inference-side post-processing: decode per-location regressions into boxes,
fuse classification and center-ness scores, threshold and suppress.

Ordering is fully deterministic: candidates are ranked by fused score
(descending), then location id, then class (ascending). Suppression uses a
strict ``IoU > threshold`` comparison.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assignment import RegTarget, centerness_array
from .geometry import Box, FeatureLevel, Location, pairwise_iou
from .ingestion import Detection

logger = logging.getLogger(__name__)

_GRID_BITS = 20
_GRID_MASK = (1 << _GRID_BITS) - 1
CENTERNESS_SOURCES = ("branch", "regression", "none")


@dataclass(frozen=True)
class PostConfig:
    score_threshold: float = 0.05
    nms_iou_threshold: float = 0.6
    use_set_nms: bool = False
    max_detections: int = 100
    class_agnostic: bool = False
    centerness_source: str = "branch"

    def __post_init__(self) -> None:
        for name in ("score_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")
        if self.centerness_source not in CENTERNESS_SOURCES:
            raise ValueError(f"unknown centerness source {self.centerness_source!r}")

    @classmethod
    def crowdhuman(cls, **overrides) -> "PostConfig":
        opts = {"nms_iou_threshold": 0.5, "use_set_nms": True, "class_agnostic": True}
        opts.update(overrides)
        return cls(**opts)


def pack_location_id(level_index: int, grid_x: int, grid_y: int) -> int:
    return (int(level_index) << (2 * _GRID_BITS)) | (int(grid_y) << _GRID_BITS) | int(grid_x)


def unpack_location_id(location_id: int) -> tuple[int, int, int]:
    """Inverse of ``pack_location_id``: (level_index, grid_x, grid_y)."""
    return (
        location_id >> (2 * _GRID_BITS),
        location_id & _GRID_MASK,
        (location_id >> _GRID_BITS) & _GRID_MASK,
    )


def decode(
    location: Location | Sequence[float],
    reg: RegTarget | Sequence[float],
    stride: float,
    scaled: bool = True,
    image_size: tuple[float, float] | None = None,
    class_id: int = 0,
) -> Box:
    """
    Invert the regression encoding: (x - l*s, y - t*s, x + r*s, y + b*s).

    ``image_size`` is (width, height); when given the box is clipped to it.
    """
    if isinstance(location, Location):
        x, y = location.image_x, location.image_y
    else:
        x, y = (float(v) for v in location)
    if isinstance(reg, RegTarget):
        l, t, r, b = reg.l, reg.t, reg.r, reg.b
    else:
        l, t, r, b = (float(v) for v in reg)
    if min(l, t, r, b) < 0:
        raise ValueError("regression distances must be non-negative")
    if scaled:
        l, t, r, b = l * stride, t * stride, r * stride, b * stride
    box = Box(x - l, y - t, x + r, y + b, class_id)
    if image_size is not None:
        box = box.clipped(*image_size)
    return box


def fuse(p, o):
    """Geometric mean of classification score and center-ness."""
    if np.ndim(p) == 0 and np.ndim(o) == 0:
        return math.sqrt(float(p) * float(o))
    return np.sqrt(np.asarray(p, dtype=np.float64) * np.asarray(o, dtype=np.float64))


def _rank(scores: np.ndarray, location_ids: np.ndarray, classes: np.ndarray) -> np.ndarray:
    # lexsort sorts by the last key first
    return np.lexsort((classes, location_ids, -scores))


def nms_arrays(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    location_ids: np.ndarray | None = None,
    classes: np.ndarray | None = None,
    skip_same_location: bool = False,
) -> np.ndarray:
    """
    Greedy NMS over arrays; returns kept indices in rank order.

    With ``skip_same_location`` a kept box never suppresses a candidate that
    carries the same location id (negative ids mean "unknown" and never
    match).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = boxes.shape[0]
    if location_ids is None:
        location_ids = np.full(n, -1, dtype=np.int64)
    if classes is None:
        classes = np.zeros(n, dtype=np.int64)
    order = _rank(scores, location_ids, classes)
    boxes = boxes[order]
    loc = location_ids[order]

    x0, y0, x1, y1 = boxes.T
    areas = (x1 - x0) * (y1 - y0)
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size == 0:
            break
        iw = np.maximum(0.0, np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]))
        ih = np.maximum(0.0, np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]))
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0.0)
        kill = ovr > iou_threshold
        if skip_same_location and loc[i] >= 0:
            kill &= loc[rest] != loc[i]
        alive[rest[kill]] = False
    return np.array(keep, dtype=np.int64)


def _det_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, ...]:
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    locs = np.array(
        [-1 if d.location_id is None else d.location_id for d in dets], dtype=np.int64
    )
    classes = np.array([d.box.class_id for d in dets], dtype=np.int64)
    return boxes, scores, locs, classes


def _suppress(
    dets: Sequence[Detection], iou_threshold: float, class_agnostic: bool, set_mode: bool
) -> list[Detection]:
    if not dets:
        return []
    boxes, scores, locs, classes = _det_arrays(dets)
    if class_agnostic:
        groups = [np.arange(len(dets))]
    else:
        groups = [np.nonzero(classes == c)[0] for c in np.unique(classes)]
    kept = []
    for idx in groups:
        sub = nms_arrays(
            boxes[idx], scores[idx], iou_threshold, locs[idx], classes[idx], skip_same_location=set_mode
        )
        kept.extend(idx[sub].tolist())
    kept = np.array(kept, dtype=np.int64)
    kept = kept[_rank(scores[kept], locs[kept], classes[kept])]
    return [dets[i] for i in kept]


def nms(dets: Sequence[Detection], iou_threshold: float, class_agnostic: bool = False) -> list[Detection]:
    """Class-wise greedy NMS; a detection dies iff IoU with a kept one exceeds the threshold."""
    return _suppress(dets, iou_threshold, class_agnostic, set_mode=False)


def set_nms(dets: Sequence[Detection], iou_threshold: float, class_agnostic: bool = False) -> list[Detection]:
    """
    NMS that never lets a box suppress another box predicted at the same location.

    Detections without a location id fall back to plain suppression; how many
    lacked one is logged as a warning.
    """
    missing = sum(d.location_id is None for d in dets)
    if missing:
        logger.warning("set_nms: %d detections without location_id use plain NMS", missing)
    return _suppress(dets, iou_threshold, class_agnostic, set_mode=True)


@dataclass
class LevelPrediction:
    """
    Raw per-location network outputs for one level.

    Shapes, with L = grid_h * grid_w locations (row-major), K prediction
    slots and C classes:
        cls_prob: (L, C) or (L, K, C)
        reg: (L, 4) or (L, K, 4), stride-scaled (l, t, r, b) unless ``scaled`` is False
        centerness: (L,) or (L, K), optional
    """

    level: FeatureLevel
    cls_prob: np.ndarray
    reg: np.ndarray
    centerness: np.ndarray | None = None
    scaled: bool = True

    def normalized(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        cls_prob = np.asarray(self.cls_prob, dtype=np.float64)
        reg = np.asarray(self.reg, dtype=np.float64)
        ctr = None if self.centerness is None else np.asarray(self.centerness, dtype=np.float64)
        if cls_prob.ndim == 2:
            cls_prob = cls_prob[:, None, :]
            reg = reg[:, None, :]
            ctr = None if ctr is None else ctr[:, None]
        n = self.level.num_locations
        if cls_prob.shape[0] != n or reg.shape[:2] != cls_prob.shape[:2]:
            raise ValueError("prediction shapes do not match the level grid")
        return cls_prob, reg, ctr


def candidates(
    predictions: Sequence[LevelPrediction],
    cfg: PostConfig = PostConfig(),
    image_size: tuple[float, float] | None = None,
) -> list[Detection]:
    """Threshold on raw class probability, decode and fuse; no suppression."""
    out: list[Detection] = []
    for li, pred in enumerate(predictions):
        cls_prob, reg, ctr = pred.normalized()
        level = pred.level
        locs, slots, classes = np.nonzero(cls_prob > cfg.score_threshold)
        if locs.size == 0:
            continue
        pts = level.points()
        s = float(level.stride) if pred.scaled else 1.0
        d = reg[locs, slots] * s
        x, y = pts[locs, 0], pts[locs, 1]
        boxes = np.stack([x - d[:, 0], y - d[:, 1], x + d[:, 2], y + d[:, 3]], axis=1)
        if image_size is not None:
            w, h = image_size
            boxes = np.stack(
                [
                    np.clip(boxes[:, 0], 0, w),
                    np.clip(boxes[:, 1], 0, h),
                    np.clip(boxes[:, 2], 0, w),
                    np.clip(boxes[:, 3], 0, h),
                ],
                axis=1,
            )
        p = cls_prob[locs, slots, classes]
        if cfg.centerness_source == "branch" and ctr is not None:
            o = ctr[locs, slots]
        elif cfg.centerness_source == "regression":
            o = centerness_array(reg[locs, slots])
        else:
            o = None
        fused = fuse(p, o) if o is not None else p
        gy, gx = np.divmod(locs, level.grid_w)
        for j in range(locs.size):
            out.append(
                Detection(
                    box=Box(*boxes[j], class_id=int(classes[j]) + 1),
                    class_score=float(p[j]),
                    centerness=None if o is None else float(o[j]),
                    fused_score=float(fused[j]),
                    location_id=pack_location_id(li, int(gx[j]), int(gy[j])),
                    slot=int(slots[j]),
                )
            )
    return out


def run_pipeline(
    predictions: Sequence[LevelPrediction],
    cfg: PostConfig = PostConfig(),
    image_size: tuple[float, float] | None = None,
) -> list[Detection]:
    """Threshold, decode, fuse, (set-)NMS and keep the top ``max_detections``."""
    dets = candidates(predictions, cfg, image_size)
    suppress = set_nms if cfg.use_set_nms else nms
    kept = suppress(dets, cfg.nms_iou_threshold, class_agnostic=cfg.class_agnostic)
    return kept[: cfg.max_detections]
