"""Detection evaluation: matching, average precision, confusion matrix.

Dataset-level inputs are flat float arrays:

* detections: (N, 7) rows [image_id, class_id, score, x1, y1, x2, y2]
* ground truth: (M, 6) rows [image_id, class_id, x1, y1, x2, y2]

Matching is greedy per class in score order: each detection takes the
still-unmatched box of its class with the highest IoU at or above the
threshold (IoU ties go to the lowest box index).  AP uses 101-point
interpolation; the dataset mAP averages only classes that have ground truth.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

MAP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between every row of ``a`` (N,4) and ``b`` (M,4), corners format."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _sort_by_score(dets: np.ndarray) -> np.ndarray:
    """Stable score-descending order (ties keep input order)."""
    return np.argsort(-dets[:, 2], kind="stable")


def match_class_detections(dets: np.ndarray, gts: np.ndarray, iou_threshold: float):
    """TP flags for same-class detections against same-class ground truth.

    Both arrays must already be filtered to one class.  Returns a bool array
    aligned with ``dets`` rows sorted by score descending, plus that order.
    """
    order = _sort_by_score(dets)
    tp = np.zeros(dets.shape[0], dtype=bool)
    matched: dict = {}
    for rank, di in enumerate(order):
        img = dets[di, 0]
        g_idx = np.nonzero(gts[:, 0] == img)[0]
        if g_idx.size == 0:
            continue
        free = [gi for gi in g_idx if gi not in matched]
        if not free:
            continue
        ious = pairwise_iou(dets[di : di + 1, 3:7], gts[np.asarray(free), 2:6])[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            tp[rank] = True
            matched[free[best]] = di
    return tp, order


def ap_from_pr(tp_sorted: np.ndarray, n_det: int, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0:
        return float("nan")
    if n_det == 0:
        return 0.0
    cum_tp = np.cumsum(tp_sorted.astype(np.float64))
    ranks = np.arange(1, n_det + 1, dtype=np.float64)
    precision = cum_tp / ranks
    recall = cum_tp / n_gt
    # precision envelope: best precision achievable at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    interp = np.where(idx < n_det, env[np.minimum(idx, n_det - 1)], 0.0)
    return float(interp.mean())


def average_precision(detections: np.ndarray, ground_truths: np.ndarray,
                      iou_threshold: float, class_id: int) -> float:
    """AP for one class at one IoU threshold (nan when the class has no GT)."""
    dets = detections[detections[:, 1] == class_id]
    gts = ground_truths[ground_truths[:, 1] == class_id]
    if gts.shape[0] == 0:
        return float("nan")
    tp, order = match_class_detections(dets, gts, iou_threshold)
    return ap_from_pr(tp, dets.shape[0], gts.shape[0])


def ap_table(detections: np.ndarray, ground_truths: np.ndarray, num_classes: int,
             thresholds=MAP_THRESHOLDS) -> np.ndarray:
    """(num_classes, len(thresholds)) AP matrix; nan rows for GT-less classes."""
    detections = np.asarray(detections, dtype=np.float64).reshape(-1, 7)
    ground_truths = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 6)
    table = np.full((num_classes, len(thresholds)), np.nan)
    for c in range(num_classes):
        if not np.any(ground_truths[:, 1] == c):
            continue
        for t, thr in enumerate(thresholds):
            table[c, t] = average_precision(detections, ground_truths, thr, c)
    return table


def mean_ap(detections: np.ndarray, ground_truths: np.ndarray, num_classes: int,
            thresholds=MAP_THRESHOLDS):
    """Returns (map at thresholds[0], mean over all thresholds, ap_table)."""
    table = ap_table(detections, ground_truths, num_classes, thresholds)
    valid = ~np.isnan(table[:, 0])
    if not valid.any():
        return 0.0, 0.0, table
    map_first = float(table[valid, 0].mean())
    map_all = float(table[valid].mean(axis=1).mean())
    return map_first, map_all, table


def pooled_tp_flags(detections: np.ndarray, ground_truths: np.ndarray,
                    iou_threshold: float = 0.5):
    """Score-sorted TP flags pooled over classes.

    Returns (scores_sorted_desc, tp_flags) covering every detection.
    """
    n = detections.shape[0]
    flags = np.zeros(n, dtype=bool)
    for c in np.unique(detections[:, 1]) if n else []:
        mask = detections[:, 1] == c
        dets_c = detections[mask]
        gts_c = ground_truths[ground_truths[:, 1] == c]
        tp, order = match_class_detections(dets_c, gts_c, iou_threshold)
        src = np.nonzero(mask)[0][order]
        flags[src] = tp
    order_all = _sort_by_score(detections) if n else np.zeros(0, dtype=np.int64)
    return detections[order_all, 2] if n else np.zeros(0), flags[order_all]


def precision_recall(detections: np.ndarray, ground_truths: np.ndarray,
                     iou_threshold: float = 0.5, conf_threshold=None):
    """Pooled precision/recall at a confidence cut.

    Without an explicit cut, the confidence maximizing F1 over all candidate
    cuts is used.  Returns (precision, recall, confidence_used).  With no
    detections both metrics are 0.
    """
    detections = np.asarray(detections, dtype=np.float64).reshape(-1, 7)
    ground_truths = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 6)
    n_gt = ground_truths.shape[0]
    scores, tp = pooled_tp_flags(detections, ground_truths, iou_threshold)
    if scores.size == 0 or n_gt == 0:
        return 0.0, 0.0, float(conf_threshold) if conf_threshold is not None else 1.0
    cum_tp = np.cumsum(tp.astype(np.float64))
    ranks = np.arange(1, scores.size + 1, dtype=np.float64)
    precisions = cum_tp / ranks
    recalls = cum_tp / n_gt
    if conf_threshold is not None:
        k = int(np.sum(scores >= conf_threshold))
        if k == 0:
            return 0.0, 0.0, float(conf_threshold)
        return float(precisions[k - 1]), float(recalls[k - 1]), float(conf_threshold)
    f1 = 2 * precisions * recalls / np.maximum(precisions + recalls, 1e-12)
    best = int(np.argmax(f1))
    return float(precisions[best]), float(recalls[best]), float(scores[best])


def confusion_matrix(detections: np.ndarray, ground_truths: np.ndarray,
                     num_classes: int, iou_threshold: float = 0.45,
                     conf_threshold: float = 0.25) -> np.ndarray:
    """(nc+1)^2 matrix, rows = true class, columns = predicted class.

    Matching here is class-agnostic: detections above the confidence cut
    greedily take the best unmatched box with IoU >= threshold regardless of
    class, so cross-class confusions land off-diagonal.  The extra index is
    background: row nc counts unmatched detections (false positives), column
    nc counts unmatched boxes (misses).  Row c (c < nc) sums to the ground
    truth count of class c.
    """
    detections = np.asarray(detections, dtype=np.float64).reshape(-1, 7)
    ground_truths = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 6)
    cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    dets = detections[detections[:, 2] >= conf_threshold]
    order = _sort_by_score(dets)
    matched_gt = set()
    for di in order:
        img = dets[di, 0]
        cand = [gi for gi in np.nonzero(ground_truths[:, 0] == img)[0] if gi not in matched_gt]
        pred_c = int(dets[di, 1])
        if cand:
            ious = pairwise_iou(dets[di : di + 1, 3:7], ground_truths[np.asarray(cand), 2:6])[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                gt_c = int(ground_truths[cand[best], 1])
                cm[gt_c, pred_c] += 1
                matched_gt.add(cand[best])
                continue
        cm[num_classes, pred_c] += 1
    for gi in range(ground_truths.shape[0]):
        if gi not in matched_gt:
            cm[int(ground_truths[gi, 1]), num_classes] += 1
    return cm


@dataclass
class EvalReport:
    """Evaluation summary; mirrors the standard results-table column order:
    Size, Param(M), FLOPs(B), Precision, Recall, mAP50, mAP50/95,
    Inference time (ms)."""

    input_size: int
    params: int
    flops: int
    precision: float
    recall: float
    map50: float
    map50_95: float
    latency_ms: dict = field(default_factory=dict)
    ap_per_class: np.ndarray = None
    confusion: np.ndarray = None
    class_names: list = None
    hardware: str = ""

    COLUMNS = ("Size", "Param(M)", "FLOPs(B)", "Precision", "Recall",
               "mAP50", "mAP50/95", "Inference time (ms)")

    def row(self):
        return (
            self.input_size,
            round(self.params / 1e6, 3),
            round(self.flops / 1e9, 2),
            round(self.precision, 4),
            round(self.recall, 4),
            round(self.map50, 4),
            round(self.map50_95, 4),
            round(self.latency_ms.get("mean", float("nan")), 2),
        )

    def table(self) -> str:
        head = " | ".join(f"{c:>12}" for c in self.COLUMNS)
        vals = " | ".join(f"{v:>12}" for v in self.row())
        return f"{head}\n{'-' * len(head)}\n{vals}"

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            w.writerow(self.row())

    def save_confusion_csv(self, path) -> None:
        if self.confusion is None:
            return
        nc = self.confusion.shape[0] - 1
        names = list(self.class_names or [f"class_{i}" for i in range(nc)])
        names.append("background")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["true\\pred"] + names)
            for i, row in enumerate(self.confusion):
                w.writerow([names[i]] + list(map(int, row)))
