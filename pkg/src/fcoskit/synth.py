"""
Deterministic synthetic scenes for tests and smoke runs.

Scenes are COCO-style datasets with boxes of log-uniform size. The crowd
mode places all objects of an image in one tight cluster so that pairs
overlap heavily, the regime where one location sees several objects.
Detections are noisy copies of the ground truth plus random false
positives.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Box, pairwise_iou
from .ingestion import Annotation, Dataset, Detection, ImageRecord

CATEGORY_IDS = (1, 2, 3)
CATEGORY_NAMES = ("person", "car", "dog")


def _box(rng: np.random.Generator, w: int, h: int, min_size: float, max_size: float) -> tuple[float, ...]:
    size = math.exp(rng.uniform(math.log(min_size), math.log(max_size)))
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    bw = min(size * math.sqrt(aspect), w - 1.0)
    bh = min(size / math.sqrt(aspect), h - 1.0)
    x0 = rng.uniform(0.0, w - bw)
    y0 = rng.uniform(0.0, h - bh)
    return x0, y0, x0 + bw, y0 + bh


def _round_box(b, w: int, h: int, decimals: int = 2) -> tuple[float, ...]:
    x0, y0, x1, y1 = (round(float(v), decimals) for v in b)
    x0, x1 = max(0.0, x0), min(float(w), x1)
    y0, y1 = max(0.0, y0), min(float(h), y1)
    return x0, y0, x1, y1


def _cluster(rng: np.random.Generator, w: int, h: int, n: int, min_size: float, max_size: float) -> list:
    base = _box(rng, w, h, min_size, max_size)
    bw, bh = base[2] - base[0], base[3] - base[1]
    out = [base]
    for _ in range(n - 1):
        dx, dy = rng.normal(0.0, 0.12, 2) * (bw, bh)
        sw, sh = np.exp(rng.normal(0.0, 0.08, 2))
        cw, ch = bw * sw, bh * sh
        cx = (base[0] + base[2]) / 2 + dx
        cy = (base[1] + base[3]) / 2 + dy
        out.append((cx - cw / 2, cy - ch / 2, cx + cw / 2, cy + ch / 2))
    return out


def synth_dataset(
    num_scenes: int,
    seed: int = 0,
    crowd: bool = False,
    max_boxes: int = 8,
    size_range: tuple[int, int] = (64, 640),
    crowd_fraction: float = 0.0,
) -> Dataset:
    """
    Generate ``num_scenes`` images.

    Args:
        num_scenes: number of images
        seed: RNG seed; equal seeds give identical datasets
        crowd: cluster objects into heavily overlapping groups
        max_boxes: upper bound on annotations per image
        size_range: bounds on image width and height
        crowd_fraction: probability that an annotation is marked iscrowd
    """
    if num_scenes < 0:
        raise ValueError("num_scenes must be >= 0")
    rng = np.random.default_rng(seed)
    images = []
    ann_id = 1
    for image_id in range(1, num_scenes + 1):
        w = int(rng.integers(size_range[0], size_range[1] + 1))
        h = int(rng.integers(size_range[0], size_range[1] + 1))
        n = int(rng.integers(1, max_boxes + 1))
        lo, hi = 4.0, 0.9 * min(w, h)
        if crowd:
            raw = _cluster(rng, w, h, max(n, 2), max(lo, 0.1 * min(w, h)), hi)
        else:
            raw = [_box(rng, w, h, lo, hi) for _ in range(n)]
        anns = []
        for b in raw:
            x0, y0, x1, y1 = _round_box(b, w, h)
            if x1 - x0 <= 0 or y1 - y0 <= 0:
                continue
            cat = int(rng.integers(0, len(CATEGORY_IDS)))
            iscrowd = bool(rng.random() < crowd_fraction)
            anns.append(Annotation(Box(x0, y0, x1, y1, cat + 1), CATEGORY_IDS[cat], iscrowd, None, ann_id))
            ann_id += 1
        images.append(ImageRecord(image_id, w, h, tuple(anns)))
    return Dataset(tuple(images), CATEGORY_IDS, CATEGORY_NAMES)


def synth_detections(
    dataset: Dataset,
    seed: int = 0,
    recall: float = 0.9,
    jitter: float = 0.08,
    false_positives: float = 2.0,
) -> dict[int, list[Detection]]:
    """
    Noisy detections for ``dataset``.

    Each non-crowd annotation is detected with probability ``recall`` by a
    box whose corners move by ``jitter`` times the box size. On top, a
    Poisson(``false_positives``) number of random boxes per image score low.
    """
    rng = np.random.default_rng(seed)
    out: dict[int, list[Detection]] = {}
    for im in dataset.images:
        dets = []
        for a in im.boxes:
            if a.iscrowd or rng.random() >= recall:
                continue
            b = a.box
            noise = rng.normal(0.0, jitter, 4) * (b.width, b.height, b.width, b.height)
            x0, y0, x1, y1 = _round_box(np.array(b.as_tuple()) + noise, im.width, im.height)
            if x1 <= x0 or y1 <= y0:
                continue
            score = round(float(rng.uniform(0.3, 1.0)), 4)
            dets.append(Detection(Box(x0, y0, x1, y1, b.class_id), score, image_id=im.image_id))
        for _ in range(int(rng.poisson(false_positives))):
            x0, y0, x1, y1 = _round_box(_box(rng, im.width, im.height, 4.0, 0.5 * min(im.width, im.height)), im.width, im.height)
            if x1 <= x0 or y1 <= y0:
                continue
            cls = int(rng.integers(1, dataset.num_classes + 1))
            score = round(float(rng.uniform(0.05, 0.6)), 4)
            dets.append(Detection(Box(x0, y0, x1, y1, cls), score, image_id=im.image_id))
        out[im.image_id] = dets
    return out


def gt_as_detections(dataset: Dataset, score: float = 1.0) -> dict[int, list[Detection]]:
    """Every non-crowd annotation as a detection with a fixed score."""
    return {
        im.image_id: [
            Detection(a.box, score, image_id=im.image_id) for a in im.boxes if not a.iscrowd
        ]
        for im in dataset.images
    }


def mean_pairwise_iou(dataset: Dataset) -> float:
    """Mean IoU over all within-image pairs of annotations; 0 when there are none."""
    total, count = 0.0, 0
    for im in dataset.images:
        boxes = np.array([a.box.as_tuple() for a in im.boxes]).reshape(-1, 4)
        n = boxes.shape[0]
        if n < 2:
            continue
        ious = pairwise_iou(boxes, boxes)
        iu = np.triu_indices(n, k=1)
        total += float(ious[iu].sum())
        count += iu[0].size
    return total / count if count else 0.0
