"""Evaluation metrics against brute-force matching and rank-cutoff AP."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from oracles import ap_rank_cutoff, iou_single

from roomdet.metrics import (
    EvalReport,
    MAP_THRESHOLDS,
    ap_from_pr,
    ap_table,
    average_precision,
    confusion_matrix,
    match_class_detections,
    mean_ap,
    pairwise_iou,
    precision_recall,
)


def match_bruteforce(dets, gts, thr):
    """Per-rank greedy matching from the definition (single class)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i, 2], i))
    taken = set()
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best, best_iou = -1, -1.0
        for gi in range(len(gts)):
            if gi in taken or gts[gi, 0] != dets[i, 0]:
                continue
            iou = iou_single(dets[i, 3:7], gts[gi, 2:6])
            if iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0 and best_iou >= thr:
            tp[rank] = True
            taken.add(best)
    return tp


def rand_eval_scene(rng, n_det=8, n_gt=5, nc=3, images=2):
    def boxes(n):
        xy = rng.uniform(0, 60, (n, 2))
        wh = rng.uniform(5, 30, (n, 2))
        return np.concatenate([xy, xy + wh], axis=1)

    dets = np.concatenate(
        [
            rng.integers(0, images, (n_det, 1)).astype(float),
            rng.integers(0, nc, (n_det, 1)).astype(float),
            rng.uniform(0.05, 1.0, (n_det, 1)),
            boxes(n_det),
        ],
        axis=1,
    )
    gts = np.concatenate(
        [
            rng.integers(0, images, (n_gt, 1)).astype(float),
            rng.integers(0, nc, (n_gt, 1)).astype(float),
            boxes(n_gt),
        ],
        axis=1,
    )
    return dets, gts


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def test_pairwise_iou_goldens():
    a = np.array([[0, 0, 10, 10]])
    b = np.array([[0, 0, 10, 10], [5, 5, 15, 15], [20, 20, 30, 30], [3, 3, 3, 9]])
    got = pairwise_iou(a, b)
    assert_allclose(got, [[1.0, 25.0 / 175.0, 0.0, 0.0]], atol=1e-12)


def test_pairwise_iou_zero_union_guard():
    z = np.array([[5, 5, 5, 5]])
    assert pairwise_iou(z, z)[0, 0] == 0.0


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2 ** 31 - 1))
def test_pairwise_iou_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 50, (3, 2))
    aw = rng.uniform(1, 20, (3, 2))
    b = rng.uniform(0, 50, (4, 2))
    bw = rng.uniform(1, 20, (4, 2))
    A = np.concatenate([a, a + aw], axis=1)
    B = np.concatenate([b, b + bw], axis=1)
    got = pairwise_iou(A, B)
    for i in range(3):
        for j in range(4):
            assert got[i, j] == pytest.approx(iou_single(A[i], B[j]), abs=1e-12)


# ---------------------------------------------------------------------------
# matching + AP
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(15))
def test_matching_agrees_with_bruteforce(seed):
    rng = np.random.default_rng(seed)
    dets, gts = rand_eval_scene(rng, n_det=10, n_gt=6, nc=1)
    tp, order = match_class_detections(dets, gts, 0.5)
    want = match_bruteforce(dets, gts, 0.5)
    assert_allclose(tp, want)


@pytest.mark.parametrize("seed", range(25))
def test_ap_matches_rank_cutoff_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    dets, gts = rand_eval_scene(rng, n_det=int(rng.integers(0, 11)), n_gt=5, nc=2)
    for c in (0, 1):
        n_gt_c = int(np.sum(gts[:, 1] == c))
        if n_gt_c == 0:
            continue
        dets_c = dets[dets[:, 1] == c]
        gts_c = gts[gts[:, 1] == c]
        flags = match_bruteforce(dets_c, gts_c, 0.5)
        want = ap_rank_cutoff(flags, n_gt_c)
        got = average_precision(dets, gts, 0.5, c)
        assert got == pytest.approx(want, abs=1e-9)


def test_ap_simple_goldens():
    assert ap_from_pr(np.array([True]), 1, 1) == pytest.approx(1.0)
    assert ap_from_pr(np.array([True, False]), 2, 1) == pytest.approx(1.0)
    # miss first, hit second: precision 0.5 at every recall point
    assert ap_from_pr(np.array([False, True]), 2, 1) == pytest.approx(0.5)
    assert ap_from_pr(np.array([False, False]), 2, 1) == 0.0
    assert ap_from_pr(np.zeros(0, dtype=bool), 0, 3) == 0.0
    assert math.isnan(ap_from_pr(np.array([True]), 1, 0))


def test_ap_two_gt_half_found():
    # one TP then one FP against two boxes: recall tops out at 0.5
    ap = ap_from_pr(np.array([True, False]), 2, 2)
    # recall grid points <= 0.5 see precision 1.0; beyond that nothing
    assert ap == pytest.approx(51 / 101, abs=1e-12)


def test_perfect_detector_scores_one():
    rng = np.random.default_rng(0)
    _, gts = rand_eval_scene(rng, n_det=0, n_gt=8, nc=3)
    dets = np.concatenate(
        [gts[:, :2], np.full((8, 1), 0.9), gts[:, 2:]], axis=1)
    map50, map5095, table = mean_ap(dets, gts, 3)
    assert map50 == 1.0
    assert map5095 == 1.0
    p, r, _ = precision_recall(dets, gts)
    assert (p, r) == (1.0, 1.0)


def test_mean_ap_ignores_classes_without_gt():
    rng = np.random.default_rng(1)
    dets, gts = rand_eval_scene(rng, n_det=6, n_gt=4, nc=2)
    map50, _, table = mean_ap(dets, gts, 5)
    assert table.shape == (5, len(MAP_THRESHOLDS))
    present = np.unique(gts[:, 1].astype(int))
    for c in range(5):
        if c not in present:
            assert np.all(np.isnan(table[c]))
    valid = table[present, 0]
    assert map50 == pytest.approx(np.mean(valid))


@pytest.mark.parametrize("seed", range(10))
def test_map5095_never_exceeds_map50(seed):
    rng = np.random.default_rng(300 + seed)
    dets, gts = rand_eval_scene(rng, n_det=12, n_gt=8, nc=3)
    map50, map5095, _ = mean_ap(dets, gts, 3)
    assert map5095 <= map50 + 1e-12


def test_mean_ap_no_gt_at_all():
    dets = np.zeros((0, 7))
    gts = np.zeros((0, 6))
    map50, map5095, table = mean_ap(dets, gts, 3)
    assert map50 == 0.0 and map5095 == 0.0
    assert np.all(np.isnan(table))


# ---------------------------------------------------------------------------
# pooled precision / recall
# ---------------------------------------------------------------------------

def test_precision_recall_explicit_cut():
    gts = np.array([[0, 0, 10, 10, 20, 20], [0, 0, 40, 40, 50, 50]])
    dets = np.array([
        [0, 0, 0.9, 10, 10, 20, 20],    # TP
        [0, 0, 0.8, 100, 100, 110, 110],  # FP
        [0, 0, 0.3, 40, 40, 50, 50],    # TP below the cut
    ])
    p, r, c = precision_recall(dets, gts, conf_threshold=0.5)
    assert (p, r, c) == (0.5, 0.5, 0.5)
    # without a cut, F1 peaks when both true boxes are found
    p2, r2, c2 = precision_recall(dets, gts)
    assert r2 == 1.0
    assert p2 == pytest.approx(2.0 / 3.0)
    assert c2 == pytest.approx(0.3)


def test_precision_recall_empty_cases():
    gts = np.array([[0, 0, 10, 10, 20, 20]])
    assert precision_recall(np.zeros((0, 7)), gts)[:2] == (0.0, 0.0)
    p, r, _ = precision_recall(np.zeros((0, 7)), np.zeros((0, 6)))
    assert (p, r) == (0.0, 0.0)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

def test_confusion_rows_sum_to_gt_counts():
    rng = np.random.default_rng(7)
    dets, gts = rand_eval_scene(rng, n_det=14, n_gt=9, nc=3)
    cm = confusion_matrix(dets, gts, 3, conf_threshold=0.1)
    for c in range(3):
        assert cm[c].sum() == np.sum(gts[:, 1] == c)
    # every confident detection lands in exactly one predicted-class column
    n_conf = np.sum(dets[:, 2] >= 0.1)
    assert cm[:, :3].sum() == n_conf


def test_confusion_perfect_detector_is_diagonal():
    rng = np.random.default_rng(8)
    _, gts = rand_eval_scene(rng, n_det=0, n_gt=6, nc=3)
    dets = np.concatenate([gts[:, :2], np.full((6, 1), 0.9), gts[:, 2:]], axis=1)
    cm = confusion_matrix(dets, gts, 3)
    assert cm.shape == (4, 4)
    off = cm - np.diag(np.diag(cm))
    assert off.sum() == 0
    assert np.trace(cm) == 6


def test_confusion_cross_class_lands_off_diagonal():
    gts = np.array([[0, 1, 10, 10, 20, 20]])
    dets = np.array([[0, 2, 0.9, 10, 10, 20, 20]])
    cm = confusion_matrix(dets, gts, 3)
    assert cm[1, 2] == 1
    assert cm.sum() == 1


def test_confusion_threshold_drops_detections():
    gts = np.array([[0, 0, 10, 10, 20, 20]])
    dets = np.array([[0, 0, 0.1, 10, 10, 20, 20]])
    cm = confusion_matrix(dets, gts, 2, conf_threshold=0.25)
    assert cm[0, 2] == 1  # the box is missed
    assert cm[0, 0] == 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def make_report():
    return EvalReport(
        input_size=640, params=2_963_360, flops=4_794_969_600,
        precision=0.8123, recall=0.7456, map50=0.812345, map50_95=0.5432,
        latency_ms={"mean": 12.34, "p50": 12.0, "p95": 14.2},
        confusion=np.array([[3, 0, 1], [1, 2, 0], [0, 1, 0]]),
        class_names=["chair", "table"],
    )


def test_report_column_order():
    assert EvalReport.COLUMNS == (
        "Size", "Param(M)", "FLOPs(B)", "Precision", "Recall",
        "mAP50", "mAP50/95", "Inference time (ms)")
    r = make_report()
    assert r.row() == (640, 2.963, 4.79, 0.8123, 0.7456, 0.8123, 0.5432, 12.34)
    text = r.table()
    assert "mAP50/95" in text and "12.34" in text


def test_report_csv_roundtrip(tmp_path):
    r = make_report()
    p = tmp_path / "report.csv"
    r.save_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == list(EvalReport.COLUMNS)
    assert float(rows[1][5]) == 0.8123
    c = tmp_path / "confusion.csv"
    r.save_confusion_csv(c)
    rows = list(csv.reader(open(c)))
    assert rows[0] == ["true\\pred", "chair", "table", "background"]
    assert [int(v) for v in rows[1][1:]] == [3, 0, 1]
