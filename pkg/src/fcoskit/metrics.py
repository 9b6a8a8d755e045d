"""
Detection metrics: COCO-protocol AP/AR, log-average miss rate (MR^-2) and
the Jaccard index (JI) used for crowded scenes.

Detections are given per image as ``{image_id: [Detection, ...]}`` and are
ranked by ``Detection.score`` (the fused score). Classes are the dense
``Box.class_id`` indices of the Dataset.

The COCO evaluation follows the reference protocol (101 recall points, 10
IoU thresholds, per-image / per-class top-100, crowd boxes as ignore regions
matched by intersection-over-detection) with two simplifications: equal-IoU
ties go to the first ground truth in (non-ignored first) order, and the
precision denominator carries no epsilon. All means are taken with
``math.fsum``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import box_area, pairwise_ioa, pairwise_iou
from .ingestion import AnnotationFormatError, Dataset, Detection

IOU_THRESHOLDS: tuple[float, ...] = tuple((50 + 5 * i) / 100 for i in range(10))
RECALL_THRESHOLDS: tuple[float, ...] = tuple(i / 100 for i in range(101))
MAX_DETS: tuple[int, ...] = (1, 10, 100)
AREA_RANGES: dict[str, tuple[float, float]] = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}
MR_CLAMP = 1e-10
JI_SCORE_GRID: tuple[float, ...] = tuple(i / 10 for i in range(10))

DetectionMap = Mapping[int, Sequence[Detection]]


@dataclass
class EvalReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AP_S: float = 0.0
    AP_M: float = 0.0
    AP_L: float = 0.0
    AR1: float = 0.0
    AR10: float = 0.0
    AR100: float = 0.0
    AR_S: float = 0.0
    AR_M: float = 0.0
    AR_L: float = 0.0
    MR2: float | None = None
    JI: float | None = None
    ji_score_threshold: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def rows(self) -> list[dict]:
        return [{"metric": k, "value": v} for k, v in self.as_dict().items() if v is not None]


@dataclass
class CocoEvalResult:
    """Raw accumulation arrays. -1 marks undefined entries (no ground truth)."""

    precision: np.ndarray  # (T, R, K, A, M)
    recall: np.ndarray  # (T, K, A, M)
    class_ids: tuple[int, ...]
    report: EvalReport


def _mean_defined(values: np.ndarray) -> float:
    v = values[values > -1]
    if v.size == 0:
        return -1.0
    return math.fsum(v.ravel()) / v.size


def _gt_dt_ious(dt_boxes: np.ndarray, gt_boxes: np.ndarray, crowd: np.ndarray) -> np.ndarray:
    ious = pairwise_iou(dt_boxes, gt_boxes)
    if crowd.any():
        ioa = pairwise_ioa(dt_boxes, gt_boxes)
        ious[:, crowd] = ioa[:, crowd]
    return ious


def _evaluate_image(
    dt_boxes: np.ndarray,
    dt_scores: np.ndarray,
    gt_boxes: np.ndarray,
    gt_crowd: np.ndarray,
    gt_area: np.ndarray,
    area_rng: tuple[float, float],
    max_det: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Greedy matching of one (image, class) pair at every IoU threshold.

    Returns:
        dt_scores (D,), dt_matched (T, D), dt_ignored (T, D), gt_ignored (G,)
        with detections in rank order, truncated to ``max_det``.
    """
    lo, hi = area_rng
    gt_ig = gt_crowd | (gt_area < lo) | (gt_area > hi)
    gorder = np.argsort(gt_ig, kind="stable")
    gt_boxes, gt_crowd, gt_ig = gt_boxes[gorder], gt_crowd[gorder], gt_ig[gorder]

    dorder = np.argsort(-dt_scores, kind="stable")[:max_det]
    dt_boxes, dt_scores = dt_boxes[dorder], dt_scores[dorder]

    num_t, num_d, num_g = len(IOU_THRESHOLDS), dt_boxes.shape[0], gt_boxes.shape[0]
    dtm = np.zeros((num_t, num_d), dtype=bool)
    dt_ig = np.zeros((num_t, num_d), dtype=bool)
    if num_g and num_d:
        ious = _gt_dt_ious(dt_boxes, gt_boxes, gt_crowd)
        for ti, thr in enumerate(IOU_THRESHOLDS):
            thr = min(thr, 1 - 1e-10)
            taken = np.zeros(num_g, dtype=bool)
            for di in range(num_d):
                cand = (ious[di] >= thr) & (~taken | gt_crowd)
                if not cand.any():
                    continue
                regular = cand & ~gt_ig
                pool = regular if regular.any() else cand
                row = np.where(pool, ious[di], -np.inf)
                gi = int(np.argmax(row))
                dtm[ti, di] = True
                dt_ig[ti, di] = gt_ig[gi]
                if not gt_crowd[gi]:
                    taken[gi] = True
    d_area = box_area(dt_boxes)
    outside = (d_area < lo) | (d_area > hi)
    dt_ig |= ~dtm & outside[None, :]
    return dt_scores, dtm, dt_ig, gt_ig


def _class_arrays(dets: Sequence[Detection], class_id: int) -> tuple[np.ndarray, np.ndarray]:
    sel = [d for d in dets if d.box.class_id == class_id]
    boxes = np.array([d.box.as_tuple() for d in sel], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in sel], dtype=np.float64)
    return boxes, scores


def _check_classes(dets: DetectionMap, dataset: Dataset) -> None:
    valid = set(range(1, dataset.num_classes + 1))
    for image_id, items in dets.items():
        for d in items:
            if d.box.class_id not in valid:
                raise AnnotationFormatError(
                    f"detection class {d.box.class_id} on image {image_id} is not a dataset category"
                )


def coco_eval(dets: DetectionMap, dataset: Dataset) -> CocoEvalResult:
    """
    COCO-protocol bbox evaluation.

    Returns the accumulated precision/recall arrays and the 12-number summary
    (AP, AP50, AP75, AP_S/M/L, AR@1/10/100, AR_S/M/L).
    """
    _check_classes(dets, dataset)
    class_ids = tuple(range(1, dataset.num_classes + 1))
    area_names = list(AREA_RANGES)
    num_t, num_r = len(IOU_THRESHOLDS), len(RECALL_THRESHOLDS)
    num_k, num_a, num_m = len(class_ids), len(area_names), len(MAX_DETS)
    precision = -np.ones((num_t, num_r, num_k, num_a, num_m))
    recall = -np.ones((num_t, num_k, num_a, num_m))
    rec_thrs = np.array(RECALL_THRESHOLDS)
    images = sorted(dataset.images, key=lambda im: im.image_id)

    for ki, cls in enumerate(class_ids):
        per_image = []
        for im in images:
            anns = [a for a in im.boxes if a.box.class_id == cls]
            dt_boxes, dt_scores = _class_arrays(dets.get(im.image_id, ()), cls)
            if not anns and dt_boxes.shape[0] == 0:
                continue
            gt_boxes = np.array([a.box.as_tuple() for a in anns], dtype=np.float64).reshape(-1, 4)
            crowd = np.array([a.iscrowd for a in anns], dtype=bool)
            area = np.array([a.eval_area for a in anns], dtype=np.float64)
            per_image.append((dt_boxes, dt_scores, gt_boxes, crowd, area))

        for ai, name in enumerate(area_names):
            evals = [
                _evaluate_image(db, ds, gb, cr, ar, AREA_RANGES[name], max(MAX_DETS))
                for db, ds, gb, cr, ar in per_image
            ]
            if not evals:
                continue
            gt_ig = np.concatenate([e[3] for e in evals])
            npig = int(np.count_nonzero(~gt_ig))
            if npig == 0:
                continue
            for mi, max_det in enumerate(MAX_DETS):
                scores = np.concatenate([e[0][:max_det] for e in evals])
                order = np.argsort(-scores, kind="mergesort")
                dtm = np.concatenate([e[1][:, :max_det] for e in evals], axis=1)[:, order]
                dt_ig = np.concatenate([e[2][:, :max_det] for e in evals], axis=1)[:, order]
                tps = dtm & ~dt_ig
                fps = ~dtm & ~dt_ig
                tp_sum = np.cumsum(tps, axis=1).astype(np.float64)
                fp_sum = np.cumsum(fps, axis=1).astype(np.float64)
                for ti in range(num_t):
                    tp, fp = tp_sum[ti], fp_sum[ti]
                    nd = tp.size
                    rc = tp / npig
                    denom = tp + fp
                    pr = np.zeros(nd)
                    np.divide(tp, denom, out=pr, where=denom > 0)
                    recall[ti, ki, ai, mi] = rc[-1] if nd else 0.0
                    # precision envelope: running max from the right
                    if nd:
                        pr = np.maximum.accumulate(pr[::-1])[::-1]
                    idx = np.searchsorted(rc, rec_thrs, side="left")
                    q = np.zeros(num_r)
                    ok = idx < nd
                    q[ok] = pr[idx[ok]]
                    precision[ti, :, ki, ai, mi] = q

    report = _summarize(precision, recall)
    return CocoEvalResult(precision, recall, class_ids, report)


def _summarize(precision: np.ndarray, recall: np.ndarray) -> EvalReport:
    a = {name: i for i, name in enumerate(AREA_RANGES)}
    m100 = MAX_DETS.index(100)
    t50 = IOU_THRESHOLDS.index(0.5)
    t75 = IOU_THRESHOLDS.index(0.75)

    def ap(area="all", t=None):
        p = precision[:, :, :, a[area], m100]
        if t is not None:
            p = p[t]
        return _mean_defined(p)

    def ar(area="all", max_det=100):
        return _mean_defined(recall[:, :, a[area], MAX_DETS.index(max_det)])

    return EvalReport(
        AP=ap(),
        AP50=ap(t=t50),
        AP75=ap(t=t75),
        AP_S=ap("small"),
        AP_M=ap("medium"),
        AP_L=ap("large"),
        AR1=ar(max_det=1),
        AR10=ar(max_det=10),
        AR100=ar(),
        AR_S=ar("small"),
        AR_M=ar("medium"),
        AR_L=ar("large"),
    )


def pr_curve_rows(result: CocoEvalResult, dataset: Dataset | None = None) -> list[dict]:
    """Rows (iou_threshold, category_id, recall, precision) for area 'all', 100 dets."""
    rows = []
    for ti, thr in enumerate(IOU_THRESHOLDS):
        for ki, cls in enumerate(result.class_ids):
            if result.recall[ti, ki, 0, -1] < 0:
                continue
            cid = dataset.original_id(cls) if dataset is not None else cls
            for ri, r in enumerate(RECALL_THRESHOLDS):
                rows.append(
                    {
                        "iou_threshold": thr,
                        "category_id": cid,
                        "recall": r,
                        "precision": float(result.precision[ti, ri, ki, 0, -1]),
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# Crowd metrics
# ---------------------------------------------------------------------------

def _single_class(dataset: Dataset, dets: DetectionMap, class_id: int | None):
    for im in dataset.images:
        anns = [a for a in im.boxes if class_id is None or a.box.class_id == class_id]
        ds = [d for d in dets.get(im.image_id, ()) if class_id is None or d.box.class_id == class_id]
        yield im.image_id, anns, ds


def match_image(
    dets: Sequence[Detection], anns, iou_thr: float = 0.5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Greedy single-class matching used for miss-rate curves.

    Returns:
        scores (D,), is_tp (D,), is_fp (D,) in rank order. A detection that
        matches no regular box but covers a crowd region (IoA >= iou_thr) is
        neither.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    boxes = np.array([dets[i].box.as_tuple() for i in order], dtype=np.float64).reshape(-1, 4)
    regular = np.array([a.box.as_tuple() for a in anns if not a.iscrowd]).reshape(-1, 4)
    crowd = np.array([a.box.as_tuple() for a in anns if a.iscrowd]).reshape(-1, 4)
    ious = pairwise_iou(boxes, regular)
    ioa = pairwise_ioa(boxes, crowd)
    taken = np.zeros(regular.shape[0], dtype=bool)
    is_tp = np.zeros(len(order), dtype=bool)
    is_fp = np.zeros(len(order), dtype=bool)
    for di in range(len(order)):
        row = np.where(taken, -np.inf, ious[di]) if regular.shape[0] else np.zeros(0)
        if row.size and row.max() >= iou_thr:
            taken[int(np.argmax(row))] = True
            is_tp[di] = True
        elif crowd.shape[0] and ioa[di].max() >= iou_thr:
            continue
        else:
            is_fp[di] = True
    return scores, is_tp, is_fp


def miss_rate_curve(
    dets: DetectionMap, dataset: Dataset, iou_thr: float = 0.5, class_id: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    FPPI and miss rate at every distinct score threshold, preceded by the
    empty-set point (0, 1).
    """
    all_scores, all_tp, all_fp = [], [], []
    num_gt = 0
    num_images = 0
    for _, anns, ds in _single_class(dataset, dets, class_id):
        num_images += 1
        num_gt += sum(not a.iscrowd for a in anns)
        s, tp, fp = match_image(ds, anns, iou_thr)
        all_scores.append(s)
        all_tp.append(tp)
        all_fp.append(fp)
    if num_gt == 0:
        raise ValueError("miss rate needs at least one ground-truth box")
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    tp = np.cumsum(np.concatenate(all_tp)[order]) if scores.size else np.zeros(0)
    fp = np.cumsum(np.concatenate(all_fp)[order]) if scores.size else np.zeros(0)
    # only the last entry of each tie group is a reachable threshold
    ends = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0] if scores.size else np.zeros(0, int)
    fppi = np.concatenate([[0.0], fp[ends] / num_images])
    miss = np.concatenate([[1.0], 1.0 - tp[ends] / num_gt])
    return fppi, miss


def mr2(
    dets: DetectionMap,
    dataset: Dataset,
    iou_thr: float = 0.5,
    fppi_range: tuple[float, float] = (1e-2, 1e2),
    num_points: int = 9,
    class_id: int | None = None,
) -> float:
    """
    Log-average miss rate over ``num_points`` FPPI anchors evenly spaced in
    log10 over ``fppi_range``. At each anchor the miss rate of the last
    curve point with FPPI <= anchor is used; rates are clamped at 1e-10
    before the log.
    """
    fppi, miss = miss_rate_curve(dets, dataset, iou_thr, class_id)
    lo, hi = math.log10(fppi_range[0]), math.log10(fppi_range[1])
    anchors = [10.0 ** e for e in np.linspace(lo, hi, num_points)]
    logs = []
    for a in anchors:
        idx = np.nonzero(fppi <= a)[0]
        m = miss[idx[-1]] if idx.size else 1.0
        logs.append(math.log(max(m, MR_CLAMP)))
    return math.exp(math.fsum(logs) / len(logs))


def max_matching(ious: np.ndarray, iou_thr: float) -> int:
    """Size of a maximum-cardinality matching on the IoU >= thr bipartite graph."""
    if ious.size == 0:
        return 0
    adj = ious >= iou_thr
    if not adj.any():
        return 0
    # maximising the number of admissible pairs is a 0/1 assignment problem
    rows, cols = linear_sum_assignment(adj.astype(np.float64), maximize=True)
    return int(adj[rows, cols].sum())


def _ji_counts(
    dets: DetectionMap, dataset: Dataset, iou_thr: float, score_threshold: float, class_id: int | None
) -> tuple[int, int]:
    num = den = 0
    for _, anns, ds in _single_class(dataset, dets, class_id):
        ds = [d for d in ds if d.score >= score_threshold]
        regular = np.array([a.box.as_tuple() for a in anns if not a.iscrowd]).reshape(-1, 4)
        crowd = np.array([a.box.as_tuple() for a in anns if a.iscrowd]).reshape(-1, 4)
        boxes = np.array([d.box.as_tuple() for d in ds], dtype=np.float64).reshape(-1, 4)
        ious = pairwise_iou(boxes, regular)
        if crowd.shape[0] and boxes.shape[0]:
            best = ious.max(axis=1) if regular.shape[0] else np.zeros(boxes.shape[0])
            ignored = (best < iou_thr) & (pairwise_ioa(boxes, crowd).max(axis=1) >= iou_thr)
            boxes, ious = boxes[~ignored], ious[~ignored]
        k = max_matching(ious, iou_thr)
        num += k
        den += regular.shape[0] + boxes.shape[0] - k
    return num, den


def jaccard_index(
    dets: DetectionMap,
    dataset: Dataset,
    iou_thr: float = 0.5,
    score_threshold: float = 0.0,
    class_id: int | None = None,
) -> float:
    """
    Dataset JI = sum(matches) / sum(|GT| + |dets| - matches) with optimal
    per-image matching at IoU >= ``iou_thr``; detections scoring below
    ``score_threshold`` are dropped first.
    """
    num, den = _ji_counts(dets, dataset, iou_thr, score_threshold, class_id)
    return num / den if den else 0.0


def best_jaccard_index(
    dets: DetectionMap,
    dataset: Dataset,
    iou_thr: float = 0.5,
    score_grid: Sequence[float] = JI_SCORE_GRID,
    class_id: int | None = None,
) -> tuple[float, float]:
    """JI at the grid score threshold that maximises it: (ji, threshold)."""
    best = (-1.0, 0.0)
    for thr in score_grid:
        ji = jaccard_index(dets, dataset, iou_thr, thr, class_id)
        if ji > best[0]:
            best = (ji, thr)
    return best


def evaluate(
    dets: DetectionMap,
    dataset: Dataset,
    crowd_metrics: bool = False,
    fppi_range: tuple[float, float] = (1e-2, 1e2),
) -> EvalReport:
    """COCO summary, plus MR^-2 and JI (class-agnostic) when ``crowd_metrics``."""
    report = coco_eval(dets, dataset).report
    if crowd_metrics:
        report.MR2 = mr2(dets, dataset, fppi_range=fppi_range)
        report.JI, report.ji_score_threshold = best_jaccard_index(dets, dataset)
    return report
