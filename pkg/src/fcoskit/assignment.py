"""
Per-location label assignment for anchor-free detection.

Every feature-map location is a training sample. A location is eligible for
a ground-truth box when it falls inside the box (or inside the box's
stride-scaled center sub-box when center sampling is on) and the level's
range test accepts it. Eligible boxes are counted (``candidate_count``) and
then one winner is picked per location (or the K closest for
multiple-instance prediction).

Conventions:
    * Containment tests are closed (``>=`` / ``<=``) on continuous coordinates.
    * The ``max_ltrb`` range test is open on both ends: a location whose
      largest distance equals a bound is negative at both adjacent levels.
    * Range tests always use unscaled pixel distances; dividing by the stride
      only applies to the stored regression target.
    * Ties (equal area / equal distance) go to the lowest annotation index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, FeatureLevel, Location
from .ingestion import ImageRecord

AMBIGUITY_POLICIES = ("min_area", "min_distance", "k_closest")
LEVEL_STRATEGIES = ("max_ltrb", "fpn_roi", "sqrt_hw_half", "max_hw_half")


@dataclass(frozen=True)
class AssignConfig:
    center_sampling: bool = True
    radius: float = 1.5
    ambiguity_policy: str = "min_area"
    k: int = 1
    level_strategy: str = "max_ltrb"
    k0: int = 5
    scale_targets_by_stride: bool = True
    include_crowd: bool = False

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.ambiguity_policy not in AMBIGUITY_POLICIES:
            raise ValueError(f"unknown ambiguity policy {self.ambiguity_policy!r}")
        if self.level_strategy not in LEVEL_STRATEGIES:
            raise ValueError(f"unknown level strategy {self.level_strategy!r}")

    @property
    def num_slots(self) -> int:
        return self.k if self.ambiguity_policy == "k_closest" else 1


@dataclass(frozen=True)
class RegTarget:
    l: float
    t: float
    r: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.t, self.r, self.b], dtype=np.float64)

    def scaled(self, factor: float) -> "RegTarget":
        return RegTarget(self.l * factor, self.t * factor, self.r * factor, self.b * factor)


@dataclass(frozen=True)
class AssignmentResult:
    """
    Targets for every location of one image, levels concatenated in order.

    Per-target arrays carry a slot axis of size ``num_slots`` (1 unless
    k-closest assignment is used). Background slots have ``source_object``
    -1, ``class_target`` 0 and NaN regression / center-ness targets.
    """

    levels: tuple[FeatureLevel, ...]
    level_index: np.ndarray  # (N,)
    grid_xy: np.ndarray  # (N, 2) int
    points: np.ndarray  # (N, 2) image coords
    source_object: np.ndarray  # (N, K) annotation index into image.boxes
    class_target: np.ndarray  # (N, K)
    reg_target: np.ndarray  # (N, K, 4)
    centerness_target: np.ndarray  # (N, K)
    candidate_count: np.ndarray  # (N,)

    @property
    def num_locations(self) -> int:
        return int(self.level_index.shape[0])

    @property
    def num_slots(self) -> int:
        return int(self.source_object.shape[1])

    @property
    def positive(self) -> np.ndarray:
        return self.class_target[:, 0] > 0

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.class_target > 0))

    def recalled_objects(self) -> set[int]:
        ids = self.source_object[self.source_object >= 0]
        return set(int(i) for i in np.unique(ids))

    def strides(self) -> np.ndarray:
        per_level = np.array([lv.stride for lv in self.levels], dtype=np.int64)
        return per_level[self.level_index]


def center_subbox(box: Box, stride: float, r: float) -> Box:
    """Square of half-width ``r * stride`` around the box center, clipped to the box."""
    cx = (box.x0 + box.x1) / 2.0
    cy = (box.y0 + box.y1) / 2.0
    half = r * stride
    return Box(
        max(cx - half, box.x0),
        max(cy - half, box.y0),
        min(cx + half, box.x1),
        min(cy + half, box.y1),
        box.class_id,
    )


def _xy(location: Location | Sequence[float]) -> tuple[float, float]:
    if isinstance(location, Location):
        return location.image_x, location.image_y
    x, y = location
    return float(x), float(y)


def encode(
    location: Location | Sequence[float],
    box: Box,
    stride: float,
    scale_by_stride: bool = True,
) -> RegTarget:
    """Distances from the location to the four box sides, divided by the stride when scaled."""
    x, y = _xy(location)
    l, t, r, b = x - box.x0, y - box.y0, box.x1 - x, box.y1 - y
    if min(l, t, r, b) < 0:
        raise ValueError(f"location ({x}, {y}) lies outside box {box.as_tuple()}")
    if scale_by_stride:
        return RegTarget(l / stride, t / stride, r / stride, b / stride)
    return RegTarget(l, t, r, b)


def centerness_target(rt: RegTarget | Sequence[float]) -> float:
    """
    sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b)); 0 if either axis is degenerate.
    """
    if isinstance(rt, RegTarget):
        l, t, r, b = rt.l, rt.t, rt.r, rt.b
    else:
        l, t, r, b = (float(v) for v in rt)
    if min(l, t, r, b) < 0:
        raise ValueError("center-ness needs non-negative distances")
    mx_lr, mx_tb = max(l, r), max(t, b)
    if mx_lr <= 0.0 or mx_tb <= 0.0:
        return 0.0
    return math.sqrt((min(l, r) / mx_lr) * (min(t, b) / mx_tb))


def centerness_from_prediction(rt: RegTarget | Sequence[float]) -> float:
    """Center-ness computed from a predicted regression vector instead of a dedicated branch."""
    return centerness_target(rt)


def centerness_array(ltrb: np.ndarray) -> np.ndarray:
    """Vectorised center-ness over the last axis of an (..., 4) array; NaN rows stay NaN."""
    ltrb = np.asarray(ltrb, dtype=np.float64)
    l, t, r, b = ltrb[..., 0], ltrb[..., 1], ltrb[..., 2], ltrb[..., 3]
    mx_lr = np.maximum(l, r)
    mx_tb = np.maximum(t, b)
    ok = (mx_lr > 0.0) & (mx_tb > 0.0)
    ratio_lr = np.divide(np.minimum(l, r), mx_lr, out=np.zeros_like(l), where=ok)
    ratio_tb = np.divide(np.minimum(t, b), mx_tb, out=np.zeros_like(t), where=ok)
    out = np.sqrt(ratio_lr * ratio_tb)
    out[np.isnan(l)] = np.nan
    return out


def fpn_roi_level(box: Box, k0: int = 5, lo: int = 3, hi: int = 7) -> int:
    """Pyramid level from the proposal-to-level rule floor(k0 + log2(sqrt(wh) / 224))."""
    size = math.sqrt(box.area)
    if size <= 0.0:
        return lo
    k = math.floor(k0 + math.log2(size / 224.0))
    return min(max(k, lo), hi)


def level_accepts(
    distances_unscaled: RegTarget | Sequence[float],
    level: FeatureLevel,
    strategy: str = "max_ltrb",
    box: Box | None = None,
    k0: int = 5,
) -> bool:
    """Whether ``level`` should regress a box at the given pixel distances."""
    if isinstance(distances_unscaled, RegTarget):
        d = (distances_unscaled.l, distances_unscaled.t, distances_unscaled.r, distances_unscaled.b)
    else:
        d = tuple(float(v) for v in distances_unscaled)
    if strategy == "max_ltrb":
        m = max(d)
        return level.range_lo < m < level.range_hi
    if box is None:
        raise ValueError(f"strategy {strategy!r} needs the box")
    if strategy == "fpn_roi":
        return fpn_roi_level(box, k0) == level.pyramid_level
    if strategy == "sqrt_hw_half":
        v = math.sqrt(box.width * box.height) / 2.0
    elif strategy == "max_hw_half":
        v = max(box.width, box.height) / 2.0
    else:
        raise ValueError(f"unknown level strategy {strategy!r}")
    return level.range_lo < v < level.range_hi


def _box_level_scalar(boxes: np.ndarray, strategy: str) -> np.ndarray:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    if strategy == "sqrt_hw_half":
        return np.sqrt(w * h) / 2.0
    return np.maximum(w, h) / 2.0


def _target_boxes(image: ImageRecord, cfg: AssignConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boxes usable as targets: (annotation indices, xyxy array, class ids)."""
    idx = [
        i
        for i, a in enumerate(image.boxes)
        if (cfg.include_crowd or not a.iscrowd) and a.box.area > 0.0
    ]
    boxes = np.array([image.boxes[i].box.as_tuple() for i in idx], dtype=np.float64).reshape(-1, 4)
    classes = np.array([image.boxes[i].box.class_id for i in idx], dtype=np.int64)
    return np.array(idx, dtype=np.int64), boxes, classes


def assign(image: ImageRecord, levels: Sequence[FeatureLevel], cfg: AssignConfig = AssignConfig()) -> AssignmentResult:
    """
    Assign targets to every location of every level.

    ``image`` boxes must already be in the resized frame the levels were
    built for.
    """
    ann_idx, boxes, classes = _target_boxes(image, cfg)
    g = boxes.shape[0]
    slots = cfg.num_slots

    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    if cfg.level_strategy == "fpn_roi":
        roi_levels = np.array(
            [fpn_roi_level(Box(*b), cfg.k0) for b in boxes], dtype=np.int64
        )
    elif cfg.level_strategy in ("sqrt_hw_half", "max_hw_half"):
        box_scalar = _box_level_scalar(boxes, cfg.level_strategy)

    parts = []
    for li, level in enumerate(levels):
        pts = level.points()
        n = pts.shape[0]
        x = pts[:, 0:1]
        y = pts[:, 1:2]
        l = x - boxes[None, :, 0]
        t = y - boxes[None, :, 1]
        r = boxes[None, :, 2] - x
        b = boxes[None, :, 3] - y
        s = float(level.stride)

        if cfg.center_sampling:
            half = cfg.radius * s
            sx0 = np.maximum(cx - half, boxes[:, 0])
            sy0 = np.maximum(cy - half, boxes[:, 1])
            sx1 = np.minimum(cx + half, boxes[:, 2])
            sy1 = np.minimum(cy + half, boxes[:, 3])
            inside = (x >= sx0) & (x <= sx1) & (y >= sy0) & (y <= sy1)
        else:
            inside = (l >= 0) & (t >= 0) & (r >= 0) & (b >= 0)

        if cfg.level_strategy == "max_ltrb":
            m = np.maximum(np.maximum(l, t), np.maximum(r, b))
            accept = (m > level.range_lo) & (m < level.range_hi)
        elif cfg.level_strategy == "fpn_roi":
            accept = np.broadcast_to(roi_levels[None, :] == level.pyramid_level, (n, g))
        else:
            accept = np.broadcast_to(
                (box_scalar > level.range_lo) & (box_scalar < level.range_hi), (n, g)
            )
        eligible = inside & accept
        count = eligible.sum(axis=1).astype(np.int64)

        if cfg.ambiguity_policy == "min_area":
            key = np.where(eligible, areas[None, :], np.inf)
        else:
            dx = x - cx[None, :]
            dy = y - cy[None, :]
            key = np.where(eligible, dx * dx + dy * dy, np.inf)

        if g == 0:
            order = np.zeros((n, slots), dtype=np.int64)
            chosen_ok = np.zeros((n, slots), dtype=bool)
        elif slots == 1:
            order = np.argmin(key, axis=1)[:, None]
            chosen_ok = np.take_along_axis(eligible, order, axis=1)
        else:
            order = np.argsort(key, axis=1, kind="stable")[:, :slots]
            if order.shape[1] < slots:
                pad = np.zeros((n, slots - order.shape[1]), dtype=np.int64)
                order = np.concatenate([order, pad], axis=1)
                valid_cols = np.arange(slots) < g
            else:
                valid_cols = np.ones(slots, dtype=bool)
            chosen_ok = np.take_along_axis(eligible, order, axis=1) & valid_cols[None, :]

        src = np.where(chosen_ok, ann_idx[order] if g else -1, -1)
        cls = np.where(chosen_ok, classes[order] if g else 0, 0)
        reg = np.full((n, slots, 4), np.nan)
        if g:
            ltrb = np.stack([l, t, r, b], axis=-1)  # (n, g, 4)
            picked = np.take_along_axis(ltrb, order[:, :, None], axis=1)
            if cfg.scale_targets_by_stride:
                picked = picked / s
            reg = np.where(chosen_ok[:, :, None], picked, np.nan)
        ctr = centerness_array(reg)

        gy, gx = np.divmod(np.arange(n, dtype=np.int64), level.grid_w)
        parts.append(
            (
                np.full(n, li, dtype=np.int64),
                np.stack([gx, gy], axis=1),
                pts,
                src.astype(np.int64),
                cls.astype(np.int64),
                reg,
                ctr,
                count,
            )
        )

    if not parts:
        raise ValueError("at least one feature level is required")
    cols = list(zip(*parts))
    return AssignmentResult(
        levels=tuple(levels),
        level_index=np.concatenate(cols[0]),
        grid_xy=np.concatenate(cols[1]),
        points=np.concatenate(cols[2]),
        source_object=np.concatenate(cols[3]),
        class_target=np.concatenate(cols[4]),
        reg_target=np.concatenate(cols[5]),
        centerness_target=np.concatenate(cols[6]),
        candidate_count=np.concatenate(cols[7]),
    )
