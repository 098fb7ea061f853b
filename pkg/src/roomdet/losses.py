"""Training losses and target assignment.

Three terms drive the detector:

* binary cross-entropy over per-anchor class probabilities,
* a distribution focal loss over the discretized box-edge distances,
* a complete-IoU loss over decoded boxes.

Assignment is a static center prior: an anchor is positive for a box when it
falls inside the box and within ``center_radius * stride`` of the box center;
conflicts resolve to the smallest box (ties to the lowest box index).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .postprocess import anchor_grid
from .tensor import ShapeError, Tensor

BCE_EPS = 1e-7


@dataclass
class FocalParams:
    alpha: float = 1.0
    gamma: float = 0.0


@dataclass
class LossWeights:
    cls: float = 0.5
    dfl: float = 1.5
    ciou: float = 7.5


@dataclass
class BBox:
    """Axis-aligned box in center format."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = -1
    score: float = 1.0

    def corners(self):
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )


@dataclass
class CIoUTerms:
    iou: float
    rho2: float
    c2: float
    v: float
    alpha: float


def bce(pred, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities.

    -(1/N) * sum(y*log(p) + (1-y)*log(1-p)), with p clamped to
    [1e-7, 1 - 1e-7] before the logs.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeError(f"bce target shape {tgt.shape} does not match pred {pred.shape}")
    if tgt.size and (tgt.min() < 0.0 or tgt.max() > 1.0):
        raise ValueError("bce targets must lie in [0, 1]")
    p = T.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(tgt * T.log(p) + (1.0 - tgt) * T.log(1.0 - p))
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    if reduction == "none":
        return losses
    raise ValueError(f"unknown reduction {reduction!r}")


def _focal_scale(p: Tensor, params: FocalParams):
    # gamma == 0 turns the modulation off entirely (plain cross-entropy);
    # the closed form 1 - p**gamma would otherwise collapse to zero.
    if params.gamma == 0.0:
        return params.alpha
    return params.alpha * (1.0 - p ** params.gamma)


def dfl(pred, target, params: FocalParams = None) -> Tensor:
    """Distribution focal loss over discrete edge-distance bins.

    ``pred`` holds one normalized distribution per row (N, bins); ``target``
    is the real-valued distance in bin units.  Each target spreads over the
    two adjacent bins: weight ceil(t)-t on floor(t) and t-floor(t) on
    ceil(t) (an integer t puts weight 1 on its own bin).  Per-bin terms are
    alpha * (1 - p^gamma) * (-log p), mean-reduced over rows.
    """
    params = params or FocalParams()
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    if pred.ndim != 2 or pred.shape[1] < 2:
        raise ShapeError(f"dfl expects (N, bins>=2) predictions, got {pred.shape}")
    n, bins = pred.shape
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (n,):
        raise ShapeError(f"dfl target shape {t.shape} does not match ({n},)")
    sums = pred.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise ValueError("dfl predictions must be normalized distributions per row")
    if np.any(t < 0.0) or np.any(t > bins - 1):
        raise ValueError(f"dfl targets must lie in [0, {bins - 1}]")

    tl = np.minimum(np.floor(t), bins - 2).astype(np.int64)
    tr = tl + 1
    wl = tr - t
    wr = t - tl
    rows = np.arange(n)
    p = T.clamp(pred, BCE_EPS, 1.0)
    pl = p[(rows, tl)]
    pr = p[(rows, tr)]
    term_l = _focal_scale(pl, params) * -T.log(pl)
    term_r = _focal_scale(pr, params) * -T.log(pr)
    per_row = wl * term_l + wr * term_r
    return per_row.mean()


def _ciou_core(px1, py1, px2, py2, tx1, ty1, tx2, ty2,
               detach_tradeoff: bool = True, eps: float = 1e-12):
    """Vectorized CIoU loss terms; prediction sides are Tensors.

    loss = 1 - IoU + rho^2/c^2 + alpha*v, where rho^2 is the squared center
    distance, c^2 the squared diagonal of the smallest enclosing box, v the
    squared-arctan aspect mismatch, and alpha = v / ((1 - IoU) + v) the
    trade-off coefficient (held constant under differentiation by default).
    """
    pw = px2 - px1
    ph = py2 - py1
    tw = tx2 - tx1
    th = ty2 - ty1
    inter_w = T.clamp(T.minimum(px2, tx2) - T.maximum(px1, tx1), lo=0.0)
    inter_h = T.clamp(T.minimum(py2, ty2) - T.maximum(py1, ty1), lo=0.0)
    inter = inter_w * inter_h
    union = pw * ph + tw * th - inter
    iou = inter / (union + eps)
    pcx, pcy = (px1 + px2) * 0.5, (py1 + py2) * 0.5
    tcx, tcy = (tx1 + tx2) * 0.5, (ty1 + ty2) * 0.5
    rho2 = (pcx - tcx) ** 2.0 + (pcy - tcy) ** 2.0
    cw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    ch = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    c2 = cw ** 2.0 + ch ** 2.0 + eps
    # truth sides are constants; keep their arctan out of the graph so the
    # pred branch sets the working dtype
    aspect_gap = np.arctan(tw / (th + 1e-9)) - T.arctan(pw / (ph + 1e-9))
    v = (4.0 / math.pi ** 2) * aspect_gap ** 2.0
    if detach_tradeoff:
        alpha = Tensor(v.data / ((1.0 - iou.data) + v.data + 1e-9))
    else:
        alpha = v / ((1.0 - iou) + v + 1e-9)
    loss = 1.0 - iou + rho2 / c2 + alpha * v
    return loss, iou, rho2, c2, v, alpha


def ciou_loss(pred: BBox, truth: BBox, detach_tradeoff: bool = True):
    """CIoU loss between two boxes; returns (scalar Tensor, CIoUTerms)."""
    for name, b in (("pred", pred), ("truth", truth)):
        if b.w <= 0 or b.h <= 0:
            raise ValueError(f"{name} box is degenerate (w={b.w}, h={b.h})")
    px = [Tensor(np.asarray([v], dtype=np.float64), requires_grad=True) for v in pred.corners()]
    tx = [np.asarray([v], dtype=np.float64) for v in truth.corners()]
    loss, iou, rho2, c2, v, alpha = _ciou_core(*px, *tx, detach_tradeoff=detach_tradeoff)
    terms = CIoUTerms(
        iou=float(iou.data[0]),
        rho2=float(rho2.data[0]),
        c2=float(c2.data[0]),
        v=float(v.data[0]),
        alpha=float(alpha.data[0] if isinstance(alpha, Tensor) else alpha),
    )
    return loss.sum(), terms


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    gt_index: np.ndarray        # (A,) int, -1 for background
    target_cls: np.ndarray      # (A, nc) float one-hot
    target_dist: np.ndarray     # (A, 4) float, stride units, clamped
    target_boxes: np.ndarray    # (A, 4) float corner px (valid on foreground)
    fg_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.fg_mask is None:
            self.fg_mask = self.gt_index >= 0

    @property
    def num_pos(self) -> int:
        return int(self.fg_mask.sum())


def assign(points, strides, gt_cls, gt_boxes, num_classes: int, reg_bins: int,
           center_radius: float = 2.5) -> Assignment:
    """Static center-prior assignment of boxes to anchors.

    ``points`` are anchor centers in pixels (A, 2), ``strides`` (A,).  Boxes
    arrive in pixel center format (G, 4).  Box borders are inclusive.  The
    encoded targets are the four anchor-to-edge distances divided by the
    anchor stride, clamped to [0, reg_bins - 1 - 0.01].
    """
    points = np.asarray(points, dtype=np.float64)
    strides = np.asarray(strides, dtype=np.float64)
    a = points.shape[0]
    gt_cls = np.asarray(gt_cls, dtype=np.int64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    g = gt_boxes.shape[0]
    if gt_cls.shape[0] != g:
        raise ShapeError("gt class/box counts differ")
    if g and (gt_cls.min() < 0 or gt_cls.max() >= num_classes):
        raise ValueError(f"gt class id outside [0, {num_classes})")
    if g and np.any(gt_boxes[:, 2:] <= 0):
        raise ValueError("gt boxes must have positive width and height")

    gt_index = np.full(a, -1, dtype=np.int64)
    target_cls = np.zeros((a, num_classes), dtype=np.float32)
    target_dist = np.zeros((a, 4), dtype=np.float32)
    target_boxes = np.zeros((a, 4), dtype=np.float32)
    if g:
        cx, cy, w, h = gt_boxes.T
        x1, y1 = cx - w / 2, cy - h / 2
        x2, y2 = cx + w / 2, cy + h / 2
        px = points[:, 0:1]
        py = points[:, 1:2]
        inside = (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
        r2 = (center_radius * strides[:, None]) ** 2
        near = (px - cx) ** 2 + (py - cy) ** 2 <= r2
        cand = inside & near
        areas = np.where(cand, (w * h)[None, :], np.inf)
        best = areas.argmin(axis=1)  # first minimum -> lowest gt index on ties
        has = cand.any(axis=1)
        gt_index[has] = best[has]

        pos = np.nonzero(has)[0]
        if pos.size:
            gi = gt_index[pos]
            target_cls[pos, gt_cls[gi]] = 1.0
            s = strides[pos]
            d = np.stack(
                [
                    (points[pos, 0] - x1[gi]) / s,
                    (points[pos, 1] - y1[gi]) / s,
                    (x2[gi] - points[pos, 0]) / s,
                    (y2[gi] - points[pos, 1]) / s,
                ],
                axis=1,
            )
            target_dist[pos] = np.clip(d, 0.0, reg_bins - 1 - 0.01)
            target_boxes[pos] = np.stack([x1[gi], y1[gi], x2[gi], y2[gi]], axis=1)

    return Assignment(gt_index, target_cls, target_dist, target_boxes)


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------

def total_loss(outputs, batch_gt, num_classes: int, reg_bins: int,
               strides=(8, 16, 32), weights: LossWeights = None,
               focal: FocalParams = None, center_radius: float = 2.5):
    """Combine classification, DFL and CIoU terms over a batch.

    ``outputs`` is the head output: one (cls_logits, reg_logits) pair per
    scale.  ``batch_gt`` is one (class_ids, boxes_cxcywh_px) pair per image.
    Classification runs over every anchor and is normalized by the positive
    count; DFL and CIoU run on positive anchors only, with the CIoU term
    weighted per-anchor by the (detached) predicted score of the target
    class.  Returns (total, components) where components holds raw
    unweighted python floats plus the positive count.
    """
    weights = weights or LossWeights()
    focal = focal or FocalParams()
    b = outputs[0][0].shape[0]
    sizes = [(c.shape[2], c.shape[3]) for c, _ in outputs]
    points, stride_arr = anchor_grid(sizes, strides)

    cls_flat = T.concat(
        [T.transpose(T.reshape(c, (b, num_classes, hh * ww)), (0, 2, 1))
         for (c, _), (hh, ww) in zip(outputs, sizes)],
        axis=1,
    )  # (B, A, nc)
    reg_flat = T.concat(
        [T.transpose(T.reshape(r, (b, 4 * reg_bins, hh * ww)), (0, 2, 1))
         for (_, r), (hh, ww) in zip(outputs, sizes)],
        axis=1,
    )  # (B, A, 4*bins)

    assigns = [
        assign(points, stride_arr, cls_ids, boxes, num_classes, reg_bins, center_radius)
        for cls_ids, boxes in batch_gt
    ]
    if len(assigns) != b:
        raise ShapeError(f"batch has {b} images but {len(assigns)} target sets")
    tcls = np.stack([asn.target_cls for asn in assigns])          # (B, A, nc)
    fg = np.stack([asn.fg_mask for asn in assigns])               # (B, A)
    num_pos = int(fg.sum())
    norm = max(1, num_pos)

    probs = T.sigmoid(cls_flat)
    cls_comp = bce(probs, tcls.astype(probs.dtype), reduction="sum") / norm

    if num_pos == 0:
        total = weights.cls * cls_comp
        comps = {"cls": float(cls_comp.data), "dfl": 0.0, "ciou": 0.0, "num_pos": 0}
        return total, comps

    bi, ai = np.nonzero(fg)
    p = bi.size
    tdist = np.concatenate([asn.target_dist[asn.fg_mask] for asn in assigns])   # (P, 4)
    tbox = np.concatenate([asn.target_boxes[asn.fg_mask] for asn in assigns])   # (P, 4)
    tcls_id = np.concatenate(
        [np.argmax(asn.target_cls[asn.fg_mask], axis=1) for asn in assigns]
    )

    reg_pos = reg_flat[(bi, ai)]                                   # (P, 4*bins)
    dist_prob = T.softmax(T.reshape(reg_pos, (p, 4, reg_bins)))    # (P, 4, bins)

    dfl_comp = dfl(
        T.reshape(dist_prob, (p * 4, reg_bins)),
        tdist.reshape(-1),
        params=focal,
    )

    binvals = np.arange(reg_bins, dtype=np.float64).reshape(1, 1, reg_bins)
    dist = (dist_prob * binvals).sum(axis=-1)                      # (P, 4) stride units
    ax = points[ai, 0]
    ay = points[ai, 1]
    s = stride_arr[ai]
    px1 = ax - dist[:, 0] * s
    py1 = ay - dist[:, 1] * s
    px2 = ax + dist[:, 2] * s
    py2 = ay + dist[:, 3] * s
    ciou_vec, _, _, _, _, _ = _ciou_core(
        px1, py1, px2, py2, tbox[:, 0], tbox[:, 1], tbox[:, 2], tbox[:, 3],
        detach_tradeoff=True,
    )
    score_w = probs.data[bi, ai, tcls_id]                          # detached
    ciou_comp = (ciou_vec * score_w).sum() / max(float(score_w.sum()), 1e-9)

    total = weights.cls * cls_comp + weights.dfl * dfl_comp + weights.ciou * ciou_comp
    comps = {
        "cls": float(cls_comp.data),
        "dfl": float(dfl_comp.data),
        "ciou": float(ciou_comp.data),
        "num_pos": num_pos,
    }
    return total, comps
