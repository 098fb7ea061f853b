"""Decoding head outputs into detections, and non-maximum suppression.

Everything here is pure numpy; no gradients flow through postprocessing.
Boxes use [x1, y1, x2, y2] pixel corners throughout.
"""

import numpy as np

from .metrics import pairwise_iou
from .tensor import ShapeError, Tensor, _sigmoid_np


def anchor_grid(sizes, strides):
    """Anchor centers for a list of (H, W) feature maps.

    Cell (i, j) of a stride-s map gets the point ((j + 0.5)*s, (i + 0.5)*s);
    scales are concatenated in the given order, each in row-major cell order.
    Returns (points (A, 2), strides (A,)).
    """
    if len(sizes) != len(strides):
        raise ShapeError("one stride per feature map is required")
    pts, sts = [], []
    for (h, w), s in zip(sizes, strides):
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        p = np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1)
        pts.append(p)
        sts.append(np.full(h * w, s, dtype=np.float64))
    return np.concatenate(pts).astype(np.float64), np.concatenate(sts)


def dfl_decode(probs: np.ndarray) -> np.ndarray:
    """Expected value of per-side bin distributions: sum_j j * p_j.

    ``probs`` is (..., bins), each trailing vector normalized within 1e-5.
    """
    probs = np.asarray(probs)
    if probs.shape[-1] < 2:
        raise ShapeError(f"dfl_decode needs >= 2 bins, got shape {probs.shape}")
    sums = probs.sum(axis=-1)
    if probs.size and np.any(np.abs(sums - 1.0) > 1e-5):
        raise ValueError("dfl_decode expects normalized distributions")
    bins = np.arange(probs.shape[-1], dtype=probs.dtype)
    return probs @ bins


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_boxes(outputs, strides=(8, 16, 32), conf_threshold: float = 0.25,
                 input_size=None):
    """Turn head outputs into per-image detection arrays.

    ``outputs`` is the per-scale list of (cls_logits, reg_logits), tensors or
    arrays shaped (B, nc, H, W) and (B, 4*bins, H, W).  A cell's score is its
    best class probability (sigmoid); cells below ``conf_threshold`` are
    dropped.  Box sides come from the DFL expectation in stride units around
    the anchor point: [x - l*s, y - t*s, x + r*s, y + b*s], clipped to the
    input square when ``input_size`` is given.

    Returns a list of (N, 6) float arrays [x1, y1, x2, y2, score, class_id].
    """
    raw = [(c.data if isinstance(c, Tensor) else np.asarray(c),
            r.data if isinstance(r, Tensor) else np.asarray(r)) for c, r in outputs]
    if len(raw) != len(strides):
        raise ShapeError(f"expected {len(strides)} scales, got {len(raw)}")
    b = raw[0][0].shape[0]
    nc = raw[0][0].shape[1]
    sizes = [(c.shape[2], c.shape[3]) for c, _ in raw]
    points, stride_arr = anchor_grid(sizes, strides)

    cls_flat = np.concatenate(
        [c.reshape(b, nc, -1).transpose(0, 2, 1) for c, _ in raw], axis=1
    )  # (B, A, nc)
    reg_flat = np.concatenate(
        [r.reshape(b, r.shape[1], -1).transpose(0, 2, 1) for _, r in raw], axis=1
    )  # (B, A, 4*bins)
    bins = reg_flat.shape[-1] // 4

    results = []
    for i in range(b):
        scores_all = _sigmoid_np(cls_flat[i])
        cls_id = scores_all.argmax(axis=1)
        score = scores_all[np.arange(scores_all.shape[0]), cls_id]
        keep = score >= conf_threshold
        if not keep.any():
            results.append(np.zeros((0, 6), dtype=np.float64))
            continue
        kidx = np.nonzero(keep)[0]
        dist = dfl_decode(_softmax_np(reg_flat[i, kidx].reshape(-1, 4, bins)))
        s = stride_arr[kidx, None]
        px = points[kidx]
        boxes = np.stack(
            [
                px[:, 0] - dist[:, 0] * s[:, 0],
                px[:, 1] - dist[:, 1] * s[:, 0],
                px[:, 0] + dist[:, 2] * s[:, 0],
                px[:, 1] + dist[:, 3] * s[:, 0],
            ],
            axis=1,
        )
        if input_size is not None:
            boxes = np.clip(boxes, 0.0, float(input_size))
        det = np.concatenate(
            [boxes, score[kidx, None], cls_id[kidx, None].astype(np.float64)], axis=1
        )
        results.append(det)
    return results


def nms(boxes: np.ndarray, scores: np.ndarray, class_ids: np.ndarray,
        iou_threshold: float = 0.45, max_det: int = 300) -> np.ndarray:
    """Greedy class-aware non-maximum suppression.

    Candidates are visited by score descending (ties: lower class id, then
    input order) and kept unless their IoU with an already-kept detection of
    the same class exceeds ``iou_threshold``.  At most ``max_det`` survive.
    Returns the kept input indices in visit order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    class_ids = np.asarray(class_ids).reshape(-1).astype(np.int64)
    n = boxes.shape[0]
    if scores.shape[0] != n or class_ids.shape[0] != n:
        raise ShapeError("nms inputs must share their first dimension")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), class_ids, -scores))
    kept: list = []
    kept_boxes: list = []
    kept_cls: list = []
    for idx in order:
        if len(kept) >= max_det:
            break
        ok = True
        if kept:
            same = [k for k, c in enumerate(kept_cls) if c == class_ids[idx]]
            if same:
                ious = pairwise_iou(boxes[idx : idx + 1], np.asarray(kept_boxes)[same])[0]
                if np.any(ious > iou_threshold):
                    ok = False
        if ok:
            kept.append(int(idx))
            kept_boxes.append(boxes[idx])
            kept_cls.append(int(class_ids[idx]))
    return np.asarray(kept, dtype=np.int64)


def postprocess(outputs, strides=(8, 16, 32), conf_threshold: float = 0.25,
                iou_threshold: float = 0.45, max_det: int = 300, input_size=None):
    """decode_boxes followed by per-image NMS; returns (N, 6) arrays."""
    decoded = decode_boxes(outputs, strides, conf_threshold, input_size)
    results = []
    for det in decoded:
        if det.shape[0] == 0:
            results.append(det)
            continue
        keep = nms(det[:, :4], det[:, 4], det[:, 5], iou_threshold, max_det)
        results.append(det[keep])
    return results
