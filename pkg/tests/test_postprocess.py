"""Anchor layout, DFL decoding, NMS, and box round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from oracles import nms_bruteforce

from roomdet.losses import assign
from roomdet.postprocess import anchor_grid, decode_boxes, dfl_decode, nms, postprocess
from roomdet.tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

def test_anchor_grid_single_scale_layout():
    points, strides = anchor_grid([(2, 2)], (8,))
    assert_allclose(points, [[4, 4], [12, 4], [4, 12], [12, 12]])
    assert_allclose(strides, [8, 8, 8, 8])


def test_anchor_grid_concat_order():
    points, strides = anchor_grid([(4, 4), (2, 2), (1, 1)], (8, 16, 32))
    assert points.shape == (16 + 4 + 1, 2)
    assert_allclose(strides[:16], 8)
    assert_allclose(strides[16:20], 16)
    assert strides[20] == 32
    assert_allclose(points[20], [16, 16])
    # centers of a stride-s map tile the same square
    assert points[:16].max() == 28.0
    assert points[16:20].max() == 24.0


def test_anchor_grid_requires_matching_lengths():
    with pytest.raises(ShapeError):
        anchor_grid([(2, 2)], (8, 16))


def test_anchor_grid_rectangular():
    points, _ = anchor_grid([(2, 3)], (8,))
    assert_allclose(points, [[4, 4], [12, 4], [20, 4], [4, 12], [12, 12], [20, 12]])


# ---------------------------------------------------------------------------
# DFL expectation
# ---------------------------------------------------------------------------

def test_dfl_decode_golden():
    assert dfl_decode(np.array([0.25, 0.75])) == pytest.approx(0.75)
    assert dfl_decode(np.array([0.0, 0.0, 1.0, 0.0])) == pytest.approx(2.0)


def test_dfl_decode_batched():
    rng = np.random.default_rng(0)
    raw = rng.uniform(0.1, 1.0, (5, 4, 8))
    p = raw / raw.sum(axis=-1, keepdims=True)
    out = dfl_decode(p)
    want = (p * np.arange(8)).sum(axis=-1)
    assert_allclose(out, want, rtol=1e-12)
    assert out.shape == (5, 4)


def test_dfl_decode_validation():
    with pytest.raises(ValueError):
        dfl_decode(np.array([0.7, 0.7]))
    with pytest.raises(ShapeError):
        dfl_decode(np.array([1.0]))


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def rand_scene(rng, n, nc=4, canvas=100.0):
    xy = rng.uniform(0, canvas - 20, (n, 2))
    wh = rng.uniform(4, 30, (n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.uniform(0.01, 1.0, n)
    cls = rng.integers(0, nc, n)
    return boxes, scores, cls


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    boxes, scores, cls = rand_scene(rng, n)
    got = nms(boxes, scores, cls, iou_threshold=0.45)
    want = nms_bruteforce(boxes, scores, cls, 0.45)
    assert_allclose(got, want)


def test_nms_score_ties_break_by_class_then_index():
    boxes = np.array([[0, 0, 10, 10], [100, 100, 110, 110], [200, 200, 210, 210]])
    scores = np.array([0.5, 0.5, 0.5])
    cls = np.array([2, 0, 0])
    keep = nms(boxes, scores, cls, 0.45)
    assert keep.tolist() == [1, 2, 0]


def test_nms_identical_boxes_same_class():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]])
    keep = nms(boxes, np.array([0.9, 0.9]), np.array([1, 1]), 0.45)
    assert keep.tolist() == [0]


def test_nms_classes_do_not_suppress_each_other():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]])
    keep = nms(boxes, np.array([0.9, 0.8]), np.array([0, 1]), 0.45)
    assert keep.tolist() == [0, 1]


def test_nms_iou_exactly_at_threshold_survives():
    # IoU exactly 0.5: [0,0,10,10] vs [0,0,10,5] -> inter 50, union 100
    boxes = np.array([[0.0, 0, 10, 10], [0.0, 0, 10, 5]])
    keep = nms(boxes, np.array([0.9, 0.8]), np.array([0, 0]), iou_threshold=0.5)
    assert keep.tolist() == [0, 1]
    keep = nms(boxes, np.array([0.9, 0.8]), np.array([0, 0]), iou_threshold=0.499)
    assert keep.tolist() == [0]


def test_nms_max_det_cutoff():
    rng = np.random.default_rng(3)
    boxes, scores, cls = rand_scene(rng, 40)
    keep = nms(boxes, scores, cls, iou_threshold=0.99, max_det=5)
    assert len(keep) == 5
    want = nms_bruteforce(boxes, scores, cls, 0.99, max_det=5)
    assert_allclose(keep, want)


def test_nms_empty_input():
    keep = nms(np.zeros((0, 4)), np.zeros(0), np.zeros(0))
    assert keep.shape == (0,)


def test_nms_shape_validation():
    with pytest.raises(ShapeError):
        nms(np.zeros((2, 4)), np.zeros(3), np.zeros(2))


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 0.9))
def test_nms_property_kept_pairs_below_threshold(seed, thr):
    rng = np.random.default_rng(seed)
    boxes, scores, cls = rand_scene(rng, 30)
    keep = nms(boxes, scores, cls, iou_threshold=thr)
    from roomdet.metrics import pairwise_iou
    for i, a in enumerate(keep):
        for b in keep[i + 1:]:
            if cls[a] == cls[b]:
                assert pairwise_iou(boxes[a:a + 1], boxes[b:b + 1])[0, 0] <= thr + 1e-12


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def one_scale_outputs(nc=3, bins=8, hw=2, cls_logit=-8.0):
    cls = np.full((1, nc, hw, hw), cls_logit, dtype=np.float64)
    reg = np.zeros((1, 4 * bins, hw, hw), dtype=np.float64)
    return cls, reg


def test_decode_boxes_peaked_distribution():
    nc, bins = 3, 8
    cls, reg = one_scale_outputs(nc, bins)
    # cell (0, 0): class 1 very confident, every side exactly 2 bins
    cls[0, 1, 0, 0] = 8.0
    reg[0, :, 0, 0] = -30.0
    for side in range(4):
        reg[0, side * bins + 2, 0, 0] = 30.0
    dets = decode_boxes([(cls, reg)], strides=(8,), conf_threshold=0.25)
    assert len(dets) == 1
    det = dets[0]
    assert det.shape == (1, 6)
    x1, y1, x2, y2, score, cid = det[0]
    # anchor (4, 4), 2 bins * stride 8 = 16 px per side
    assert_allclose([x1, y1, x2, y2], [-12, -12, 20, 20], atol=1e-5)
    assert cid == 1
    assert score == pytest.approx(1.0 / (1.0 + np.exp(-8.0)), rel=1e-6)


def test_decode_boxes_clips_to_input_square():
    cls, reg = one_scale_outputs()
    cls[0, 0, 0, 0] = 8.0
    reg[0, :, 0, 0] = -30.0
    for side in range(4):
        reg[0, side * 8 + 2, 0, 0] = 30.0
    dets = decode_boxes([(cls, reg)], strides=(8,), conf_threshold=0.25, input_size=16)
    assert_allclose(dets[0][0, :4], [0, 0, 16, 16], atol=1e-5)


def test_decode_boxes_threshold_filters_everything():
    cls, reg = one_scale_outputs()
    dets = decode_boxes([(cls, reg)], strides=(8,), conf_threshold=0.25)
    assert dets[0].shape == (0, 6)


def test_decode_boxes_accepts_tensors_and_batches():
    nc, bins = 2, 4
    rng = np.random.default_rng(5)
    outs = [
        (Tensor(rng.normal(0, 1, (3, nc, 4, 4))), Tensor(rng.normal(0, 1, (3, 4 * bins, 4, 4)))),
        (Tensor(rng.normal(0, 1, (3, nc, 2, 2))), Tensor(rng.normal(0, 1, (3, 4 * bins, 2, 2)))),
    ]
    dets = decode_boxes(outs, strides=(8, 16), conf_threshold=0.0)
    assert len(dets) == 3
    for det in dets:
        assert det.shape == (20, 6)
        assert np.all(det[:, 4] >= 0) and np.all(det[:, 4] <= 1)
        assert set(np.unique(det[:, 5])) <= {0.0, 1.0}


def test_decode_boxes_scale_count_mismatch():
    cls, reg = one_scale_outputs()
    with pytest.raises(ShapeError):
        decode_boxes([(cls, reg)], strides=(8, 16))


def test_postprocess_runs_nms_per_image():
    nc, bins = 2, 4
    cls = np.full((1, nc, 2, 2), -8.0)
    reg = np.zeros((1, 4 * bins, 2, 2))
    # two adjacent cells predict the same class with near-identical big boxes
    for cell in ((0, 0), (0, 1)):
        cls[0, 0, cell[0], cell[1]] = 6.0
        reg[0, :, cell[0], cell[1]] = -30.0
        for side in range(4):
            reg[0, side * bins + 3, cell[0], cell[1]] = 30.0
    raw = decode_boxes([(cls, reg)], strides=(8,), conf_threshold=0.25)
    assert raw[0].shape[0] == 2
    dets = postprocess([(cls, reg)], strides=(8,), conf_threshold=0.25, iou_threshold=0.45)
    assert dets[0].shape[0] == 1


# ---------------------------------------------------------------------------
# encode -> decode round trip
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_encode_decode_round_trip_within_half_stride(seed):
    """Nearest-bin encoding reproduces each side within 0.51 * stride."""
    rng = np.random.default_rng(seed)
    bins = 16
    points, strides = anchor_grid([(8, 8), (4, 4), (2, 2)], (8, 16, 32))
    g = 4
    boxes = np.stack([
        rng.uniform(16, 48, g), rng.uniform(16, 48, g),
        rng.uniform(8, 28, g), rng.uniform(8, 28, g),
    ], axis=1)
    asn = assign(points, strides, np.zeros(g, np.int64), boxes, num_classes=1, reg_bins=bins)
    fg = np.nonzero(asn.fg_mask)[0]
    assert fg.size > 0
    for ai in fg:
        t = asn.target_dist[ai]
        if t.max() >= bins - 1 - 0.02:
            continue  # clamped targets cannot round-trip
        onehot = np.zeros((4, bins))
        onehot[np.arange(4), np.round(t).astype(int)] = 1.0
        d = dfl_decode(onehot)
        s = strides[ai]
        x, y = points[ai]
        decoded = np.array([x - d[0] * s, y - d[1] * s, x + d[2] * s, y + d[3] * s])
        assert np.max(np.abs(decoded - asn.target_boxes[ai])) <= 0.51 * s


def test_interpolated_encoding_round_trips_exactly():
    # two-bin weights preserve the expectation, so decode is exact
    bins = 16
    t = np.array([3.25, 0.4, 7.99, 12.0])
    rows = np.zeros((4, bins))
    tl = np.floor(t).astype(int)
    rows[np.arange(4), tl] = 1.0 - (t - tl)
    rows[np.arange(4), np.minimum(tl + 1, bins - 1)] += t - tl
    assert_allclose(dfl_decode(rows), t, atol=1e-12)
