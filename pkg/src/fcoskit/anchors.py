"""
RetinaNet-style anchors and IoU matching, used as the anchor-based baseline
for best-possible-recall comparisons.

Matching rule: every anchor is owned by its argmax-IoU annotation (ties to
the lowest index) and by no other. Step 1 marks an anchor positive when its
max IoU reaches ``positive_iou``. Step 2 optionally lets each annotation
claim its best anchors (all anchors tying the annotation's max IoU), but a
claimed anchor still goes to its own argmax annotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import FeatureLevel, pairwise_iou

LOW_QUALITY_POLICIES = ("none", "threshold", "all")


@dataclass(frozen=True)
class AnchorConfig:
    size_per_stride: float = 4.0
    scales: tuple[float, ...] = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    positive_iou: float = 0.5
    low_quality_policy: str = "threshold"
    low_quality_threshold: float = 0.4
    base_sizes: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.low_quality_policy not in LOW_QUALITY_POLICIES:
            raise ValueError(f"unknown low-quality policy {self.low_quality_policy!r}")
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be non-empty")

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.ratios)

    def base_size(self, level_index: int, stride: int) -> float:
        if self.base_sizes is not None:
            return float(self.base_sizes[level_index])
        return self.size_per_stride * stride


@dataclass(frozen=True)
class MatchResult:
    matched: np.ndarray  # (A,) annotation index or -1
    recalled: np.ndarray  # (G,) bool
    max_iou: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def num_recalled(self) -> int:
        return int(np.count_nonzero(self.recalled))


def cell_anchors(base_size: float, scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """
    Anchor shapes centred on the origin, shape (len(ratios) * len(scales), 4).

    ``ratio`` is height / width; the area size**2 is preserved across ratios.
    """
    out = []
    for ratio in ratios:
        for scale in scales:
            size = base_size * scale
            w = size / math.sqrt(ratio)
            h = size * math.sqrt(ratio)
            out.append((-w / 2.0, -h / 2.0, w / 2.0, h / 2.0))
    return np.array(out, dtype=np.float64)


def generate_anchors(levels: Sequence[FeatureLevel], cfg: AnchorConfig = AnchorConfig()) -> list[np.ndarray]:
    """
    Anchors for every level, centred on each location's image coordinates.

    Returns:
        One (grid_h * grid_w * A, 4) xyxy array per level; anchors of one
        location are contiguous.
    """
    per_level = []
    for li, level in enumerate(levels):
        cells = cell_anchors(cfg.base_size(li, level.stride), cfg.scales, cfg.ratios)
        pts = level.points()
        shifts = np.concatenate([pts, pts], axis=1)
        per_level.append((shifts[:, None, :] + cells[None, :, :]).reshape(-1, 4))
    return per_level


def match(anchors: np.ndarray, annotations: np.ndarray, cfg: AnchorConfig = AnchorConfig()) -> MatchResult:
    """
    Match anchors to annotation boxes.

    Args:
        anchors: (A, 4) xyxy
        annotations: (G, 4) xyxy, same frame
        cfg: thresholds and low-quality policy

    Returns:
        MatchResult with per-anchor owner (-1 = unmatched) and per-annotation recall.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(annotations, dtype=np.float64).reshape(-1, 4)
    num_a, num_g = anchors.shape[0], gts.shape[0]
    if num_g == 0 or num_a == 0:
        return MatchResult(
            np.full(num_a, -1, dtype=np.int64), np.zeros(num_g, dtype=bool), np.zeros(num_a)
        )
    ious = pairwise_iou(anchors, gts)  # (A, G)
    owner = np.argmax(ious, axis=1)
    owner_iou = ious[np.arange(num_a), owner]
    matched = np.where(owner_iou >= cfg.positive_iou, owner, -1)

    if cfg.low_quality_policy != "none":
        best = ious.max(axis=0)  # (G,)
        claims = best > 0.0
        if cfg.low_quality_policy == "threshold":
            claims &= best >= cfg.low_quality_threshold
        # anchors tying some claiming annotation's best IoU
        hit = (ious == best[None, :]) & claims[None, :]
        forced = hit.any(axis=1)
        matched = np.where(forced, owner, matched)

    recalled = np.zeros(num_g, dtype=bool)
    recalled[matched[matched >= 0]] = True
    return MatchResult(matched.astype(np.int64), recalled, owner_iou)


def match_levels(
    anchors_per_level: Sequence[np.ndarray], annotations: np.ndarray, cfg: AnchorConfig = AnchorConfig()
) -> MatchResult:
    """Same as ``match`` over the concatenation of all levels' anchors."""
    return match(np.concatenate(list(anchors_per_level), axis=0), annotations, cfg)
