"""
Loss kernels with analytic gradients.

All kernels take probabilities (not logits) and are elementwise over numpy
arrays: ``value`` and ``gradient`` have the shape of the prediction input.
Probabilities are clamped into [EPS, 1 - EPS]; the gradient is zeroed where
the clamp is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

EPS = 1e-7

Gradient = Union[np.ndarray, dict]


@dataclass(frozen=True)
class LossConfig:
    """Loss weights. alpha and gamma keep the RetinaNet focal-loss defaults."""

    alpha: float = 0.25
    gamma: float = 2.0
    reg_weight: float = 1.0
    centerness_loss: str = "bce"  # or "l1"
    reg_loss: str = "giou"  # or "iou"

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if not self.reg_weight > 0.0:
            raise ValueError("reg_weight must be positive")
        if self.centerness_loss not in ("bce", "l1"):
            raise ValueError("centerness_loss must be 'bce' or 'l1'")
        if self.reg_loss not in ("giou", "iou"):
            raise ValueError("reg_loss must be 'giou' or 'iou'")


@dataclass(frozen=True)
class LossValue:
    value: float | np.ndarray
    gradient: Gradient

    def total(self) -> float:
        return math.fsum(np.ravel(self.value))


def _clamp(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    clamped = np.clip(p, EPS, 1.0 - EPS)
    return clamped, (p >= EPS) & (p <= 1.0 - EPS)


def focal(p, y, cfg: LossConfig = LossConfig()) -> LossValue:
    """
    Binary focal loss on probabilities.

    y = 1: -alpha * (1 - p)**gamma * log(p)
    y = 0: -(1 - alpha) * p**gamma * log(1 - p)
    """
    p, free = _clamp(p)
    y = np.asarray(y, dtype=np.float64)
    a, g = cfg.alpha, cfg.gamma
    q = 1.0 - p
    log_p = np.log(p)
    log_q = np.log(q)
    pos = -a * q**g * log_p
    neg = -(1.0 - a) * p**g * log_q
    # d/dp of each branch; q**(g-1) is guarded for g == 0
    qg1 = g * q ** (g - 1.0) if g != 0.0 else np.zeros_like(q)
    pg1 = g * p ** (g - 1.0) if g != 0.0 else np.zeros_like(p)
    d_pos = a * (qg1 * log_p - q**g / p)
    d_neg = -(1.0 - a) * (pg1 * log_q - p**g / q)
    value = np.where(y > 0.5, pos, neg)
    grad = np.where(y > 0.5, d_pos, d_neg) * free
    return LossValue(value, grad)


def bce(o, c) -> LossValue:
    """Binary cross entropy -c log o - (1 - c) log(1 - o) with soft target c."""
    o, free = _clamp(o)
    c = np.asarray(c, dtype=np.float64)
    value = -c * np.log(o) - (1.0 - c) * np.log(1.0 - o)
    grad = (-c / o + (1.0 - c) / (1.0 - o)) * free
    return LossValue(value, grad)


def l1(o, c) -> LossValue:
    """|o - c|, the L1 alternative for center-ness supervision."""
    o = np.asarray(o, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    return LossValue(np.abs(o - c), np.sign(o - c))


def _giou_core(pred: np.ndarray, target: np.ndarray, with_hull: bool) -> tuple[np.ndarray, np.ndarray]:
    """
    1 - GIoU (or 1 - IoU) for (N, 4) xyxy arrays and its gradient w.r.t. pred corners.
    """
    px0, py0, px1, py1 = pred.T
    tx0, ty0, tx1, ty1 = target.T

    pw, ph = px1 - px0, py1 - py0
    tw, th = tx1 - tx0, ty1 - ty0
    area_p = pw * ph
    area_t = tw * th

    ix0 = np.maximum(px0, tx0)
    iy0 = np.maximum(py0, ty0)
    ix1 = np.minimum(px1, tx1)
    iy1 = np.minimum(py1, ty1)
    iw_raw = ix1 - ix0
    ih_raw = iy1 - iy0
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = area_p + area_t - inter

    # d(iw)/d(px0), d(iw)/d(px1), ... ; zero when the overlap is empty on that axis
    ow = (iw_raw > 0.0).astype(np.float64)
    oh = (ih_raw > 0.0).astype(np.float64)
    d_iw = np.stack([-ow * (px0 > tx0), (px1 < tx1) * ow], axis=1)
    d_ih = np.stack([-oh * (py0 > ty0), (py1 < ty1) * oh], axis=1)

    d_inter = np.stack(
        [d_iw[:, 0] * ih, d_ih[:, 0] * iw, d_iw[:, 1] * ih, d_ih[:, 1] * iw], axis=1
    )
    d_area_p = np.stack([-ph, -pw, ph, pw], axis=1)
    d_union = d_area_p - d_inter

    iou = inter / union
    d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / (union**2)[:, None]

    if not with_hull:
        return 1.0 - iou, -d_iou

    cx0 = np.minimum(px0, tx0)
    cy0 = np.minimum(py0, ty0)
    cx1 = np.maximum(px1, tx1)
    cy1 = np.maximum(py1, ty1)
    cw, ch = cx1 - cx0, cy1 - cy0
    hull = cw * ch
    d_cw = np.stack([-(px0 < tx0).astype(np.float64), (px1 > tx1).astype(np.float64)], axis=1)
    d_ch = np.stack([-(py0 < ty0).astype(np.float64), (py1 > ty1).astype(np.float64)], axis=1)
    d_hull = np.stack(
        [d_cw[:, 0] * ch, d_ch[:, 0] * cw, d_cw[:, 1] * ch, d_ch[:, 1] * cw], axis=1
    )
    # GIoU = IoU - 1 + union / hull
    giou = iou - 1.0 + union / hull
    d_frac = (d_union * hull[:, None] - union[:, None] * d_hull) / (hull**2)[:, None]
    return 1.0 - giou, -(d_iou + d_frac)


def giou_loss(pred_ltrb, target_ltrb, use_giou: bool = True) -> LossValue:
    """
    1 - GIoU between boxes predicted and targeted from one shared location.

    Args:
        pred_ltrb: (N, 4) or (4,) predicted distances (l, t, r, b); clamped at EPS
        target_ltrb: same shape, non-degenerate target distances
        use_giou: False gives the plain 1 - IoU loss

    Returns:
        LossValue with per-row values and (N, 4) gradient w.r.t. pred_ltrb.
    """
    pred = np.asarray(pred_ltrb, dtype=np.float64)
    target = np.asarray(target_ltrb, dtype=np.float64)
    single = pred.ndim == 1
    pred = pred.reshape(-1, 4)
    target = target.reshape(-1, 4)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    free = pred >= EPS
    pred = np.maximum(pred, EPS)
    # a box around the origin: (-l, -t, r, b)
    pbox = np.stack([-pred[:, 0], -pred[:, 1], pred[:, 2], pred[:, 3]], axis=1)
    tbox = np.stack([-target[:, 0], -target[:, 1], target[:, 2], target[:, 3]], axis=1)
    value, d_box = _giou_core(pbox, tbox, use_giou)
    grad = d_box * np.array([-1.0, -1.0, 1.0, 1.0]) * free
    if single:
        return LossValue(float(value[0]), grad[0])
    return LossValue(value, grad)


def giou_loss_boxes(pred, target, use_giou: bool = True) -> LossValue:
    """
    1 - GIoU for xyxy boxes. Gradient is w.r.t. the pred corners (x0, y0, x1, y1);
    negate the first two components for the (l, t, r, b) parametrisation.
    """
    from .geometry import Box

    def arr(b):
        if isinstance(b, Box):
            return np.array([b.as_tuple()], dtype=np.float64)
        return np.asarray(b, dtype=np.float64).reshape(-1, 4)

    p, t = arr(pred), arr(target)
    single = isinstance(pred, Box) or np.asarray(pred).ndim == 1
    value, grad = _giou_core(p, t, use_giou)
    if single:
        return LossValue(float(value[0]), grad[0])
    return LossValue(value, grad)


def total_loss(
    cls_prob,
    class_target,
    reg_pred,
    reg_target,
    ctr_pred,
    ctr_target,
    cfg: LossConfig = LossConfig(),
) -> LossValue:
    """
    Composite detection loss for one image's locations.

    Args:
        cls_prob: (N, C) per-class probabilities
        class_target: (N,) integers in 0..C, 0 = background
        reg_pred, reg_target: (N, 4) distances; only positive rows are read
        ctr_pred, ctr_target: (N,) center-ness prediction / target
        cfg: loss hyper-parameters

    Returns:
        LossValue whose gradient is a dict with keys ``cls``, ``reg``, ``ctr``
        shaped like the corresponding inputs. Every term is normalised by
        max(N_pos, 1).
    """
    cls_prob = np.asarray(cls_prob, dtype=np.float64)
    class_target = np.asarray(class_target).astype(np.int64)
    reg_pred = np.asarray(reg_pred, dtype=np.float64)
    reg_target = np.asarray(reg_target, dtype=np.float64)
    ctr_pred = np.asarray(ctr_pred, dtype=np.float64)
    ctr_target = np.asarray(ctr_target, dtype=np.float64)

    if cls_prob.ndim != 2:
        raise ValueError("cls_prob must be (N, C)")
    n, num_classes = cls_prob.shape
    if class_target.shape != (n,) or reg_pred.shape != (n, 4) or reg_target.shape != (n, 4):
        raise ValueError("inconsistent shapes between classification and regression inputs")
    if ctr_pred.shape != (n,) or ctr_target.shape != (n,):
        raise ValueError("inconsistent center-ness shapes")
    if class_target.size and (class_target.min() < 0 or class_target.max() > num_classes):
        raise ValueError("class_target out of range")

    pos = class_target > 0
    num_pos = int(np.count_nonzero(pos))
    norm = float(max(num_pos, 1))

    onehot = np.zeros_like(cls_prob)
    onehot[pos, class_target[pos] - 1] = 1.0
    f = focal(cls_prob, onehot, cfg)

    g_reg = np.zeros_like(reg_pred)
    g_ctr = np.zeros_like(ctr_pred)
    reg_sum = 0.0
    ctr_sum = 0.0
    if num_pos:
        r = giou_loss(reg_pred[pos], reg_target[pos], use_giou=cfg.reg_loss == "giou")
        reg_sum = math.fsum(np.ravel(r.value))
        g_reg[pos] = cfg.reg_weight * r.gradient / norm
        c = bce(ctr_pred[pos], ctr_target[pos]) if cfg.centerness_loss == "bce" else l1(
            ctr_pred[pos], ctr_target[pos]
        )
        ctr_sum = math.fsum(np.ravel(c.value))
        g_ctr[pos] = c.gradient / norm

    value = (math.fsum(np.ravel(f.value)) + cfg.reg_weight * reg_sum + ctr_sum) / norm
    return LossValue(value, {"cls": f.gradient / norm, "reg": g_reg, "ctr": g_ctr})


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def central_difference(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


@dataclass(frozen=True)
class GradCheckResult:
    kernel: str
    samples: int
    failures: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def as_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "samples": self.samples,
            "failures": self.failures,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }

    def rows(self) -> list[dict]:
        return [self.as_dict()]


def _sample_ltrb_pair(rng: np.random.Generator, margin: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    # keep every coordinate pair at least `margin` apart so no min/max kink is within the step
    while True:
        pred = rng.uniform(0.05, 5.0, size=4)
        target = rng.uniform(0.05, 5.0, size=4)
        if np.all(np.abs(pred - target) > margin):
            return pred, target


def gradcheck(
    samples: int = 1000,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    cfg: LossConfig = LossConfig(),
    flip_sign: str | None = None,
) -> list[GradCheckResult]:
    """
    Compare analytic gradients of focal, giou_loss and bce with central
    differences at ``samples`` random points each.

    ``flip_sign`` names a kernel whose analytic gradient is negated before the
    comparison; it exists to prove the check can fail.
    """
    rng = np.random.default_rng(seed)
    results = []

    def finish(name: str, errors: list[float]) -> None:
        fails = sum(e >= tolerance for e in errors)
        results.append(
            GradCheckResult(name, len(errors), fails, max(errors, default=0.0), tolerance)
        )

    sign = {k: (-1.0 if flip_sign == k else 1.0) for k in ("focal", "giou_loss", "bce")}

    errors = []
    for _ in range(samples):
        p = rng.uniform(0.01, 0.99)
        y = float(rng.integers(0, 2))
        analytic = sign["focal"] * focal(p, y, cfg).gradient
        numeric = central_difference(lambda x: float(focal(x, y, cfg).value), np.array(p), step)
        errors.append(relative_error(analytic, numeric))
    finish("focal", errors)

    errors = []
    for _ in range(samples):
        pred, target = _sample_ltrb_pair(rng)
        analytic = sign["giou_loss"] * giou_loss(pred, target).gradient
        numeric = central_difference(lambda x: float(giou_loss(x, target).value), pred, step)
        errors.append(relative_error(analytic, numeric))
    finish("giou_loss", errors)

    errors = []
    for _ in range(samples):
        o = rng.uniform(0.01, 0.99)
        c = rng.uniform(0.0, 1.0)
        analytic = sign["bce"] * bce(o, c).gradient
        numeric = central_difference(lambda x: float(bce(x, c).value), np.array(o), step)
        errors.append(relative_error(analytic, numeric))
    finish("bce", errors)
    return results
