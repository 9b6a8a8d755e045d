"""
Geometry
========

Boxes, overlap measures, image resizing and the mapping from feature-map
grid cells back to input-image pixels.

Box format throughout is xyxy: (x0, y0, x1, y1) with (x0, y0) the top-left
corner. Coordinates are continuous pixels of the (possibly resized) input
image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

INF = math.inf

DEFAULT_STRIDES: tuple[int, ...] = (8, 16, 32, 64, 128)
DEFAULT_BOUNDS: tuple[float, ...] = (0.0, 64.0, 128.0, 256.0, 512.0, INF)
DEFAULT_RANGES: tuple[tuple[float, float], ...] = tuple(
    zip(DEFAULT_BOUNDS[:-1], DEFAULT_BOUNDS[1:])
)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with a class label (dense index, 0 = unset)."""

    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ValueError(f"invalid box corners: {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def scaled(self, factor: float) -> "Box":
        return Box(
            self.x0 * factor,
            self.y0 * factor,
            self.x1 * factor,
            self.y1 * factor,
            self.class_id,
        )

    def clipped(self, width: float, height: float) -> "Box":
        x0 = min(max(self.x0, 0.0), width)
        y0 = min(max(self.y0, 0.0), height)
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        return Box(x0, y0, x1, y1, self.class_id)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, class_id: int = 0) -> "Box":
        return cls(x, y, x + w, y + h, class_id)

    def to_xywh(self) -> list[float]:
        return [self.x0, self.y0, self.x1 - self.x0, self.y1 - self.y0]


@dataclass(frozen=True)
class FeatureLevel:
    """One pyramid level: stride, regression range (range_lo, range_hi) and grid shape."""

    stride: int
    range_lo: float
    range_hi: float
    grid_w: int
    grid_h: int

    def __post_init__(self) -> None:
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if not self.range_lo < self.range_hi:
            raise ValueError(f"empty range ({self.range_lo}, {self.range_hi})")

    @property
    def pyramid_level(self) -> int:
        """The P-index of the level (stride 8 -> 3, ..., 128 -> 7)."""
        return int(round(math.log2(self.stride)))

    @property
    def num_locations(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def offset(self) -> int:
        return self.stride // 2

    def points(self) -> np.ndarray:
        """Image coordinates of every location, row-major, shape (grid_h * grid_w, 2)."""
        xs = self.offset + np.arange(self.grid_w, dtype=np.float64) * self.stride
        ys = self.offset + np.arange(self.grid_h, dtype=np.float64) * self.stride
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass(frozen=True)
class Location:
    level_index: int
    grid_x: int
    grid_y: int
    image_x: float
    image_y: float


@dataclass(frozen=True)
class ResizeSpec:
    target_short: float = 800
    max_long: float = 1333


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union."""
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(a.x1, b.x1) - min(a.x0, b.x0)) * (max(a.y1, b.y1) - min(a.y0, b.y0))
    if hull <= 0.0:
        return 0.0
    overlap = inter / union if union > 0.0 else 0.0
    return overlap - (hull - union) / hull


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pairwise_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """
    IoU between every pair of two box sets.

    Args:
        boxes1: (N, 4) xyxy boxes
        boxes2: (M, 4) xyxy boxes

    Returns:
        (N, M) IoU matrix; entries with an empty union are 0.
    """
    a = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(
        0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    )
    ih = np.maximum(
        0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    )
    inter = iw * ih
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def pairwise_ioa(boxes: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Intersection over the area of each box in ``boxes`` (used for ignore regions)."""
    a = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(regions, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(
        0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    )
    ih = np.maximum(
        0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    )
    inter = iw * ih
    area = box_area(a)[:, None] * np.ones((1, b.shape[0]))
    out = np.zeros_like(inter)
    np.divide(inter, area, out=out, where=area > 0.0)
    return out


def resize(width: float, height: float, spec: ResizeSpec = ResizeSpec()) -> tuple[int, int, float]:
    """
    Scale an image so its short side hits ``spec.target_short`` without the
    long side exceeding ``spec.max_long``.

    Returns:
        (new_width, new_height, scale), dims rounded half-up to integers.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    short, long = min(width, height), max(width, height)
    scale = min(spec.target_short / short, spec.max_long / long)
    return _round_half_up(width * scale), _round_half_up(height * scale), scale


def build_levels(
    new_width: int,
    new_height: int,
    strides: Sequence[int] = DEFAULT_STRIDES,
    ranges: Sequence[tuple[float, float]] | None = None,
) -> list[FeatureLevel]:
    """One FeatureLevel per stride with grid dims ceil(dim / stride)."""
    if not strides:
        raise ValueError("at least one stride is required")
    if ranges is None:
        if len(strides) == 1:
            ranges = [(0.0, INF)]
        elif tuple(strides) == DEFAULT_STRIDES:
            ranges = list(DEFAULT_RANGES)
        else:
            raise ValueError("ranges must be given for non-default strides")
    if len(ranges) != len(strides):
        raise ValueError("one range per stride is required")
    if any(b <= a for a, b in zip(strides, strides[1:])):
        raise ValueError("strides must be strictly ascending")
    for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
        if hi != lo:
            raise ValueError("ranges must be contiguous")
    return [
        FeatureLevel(
            stride=int(s),
            range_lo=float(lo),
            range_hi=float(hi),
            grid_w=math.ceil(new_width / s),
            grid_h=math.ceil(new_height / s),
        )
        for s, (lo, hi) in zip(strides, ranges)
    ]


def enumerate_locations(level: FeatureLevel, level_index: int = 0) -> list[Location]:
    s, off = level.stride, level.offset
    return [
        Location(level_index, gx, gy, float(off + gx * s), float(off + gy * s))
        for gy in range(level.grid_h)
        for gx in range(level.grid_w)
    ]


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)
