import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqpcd.heads import box_iou
from aqpcd.metrics import average_precision, best_f1, evaluate, match_detections


def brute_match_count(dets, gts, thr):
    """Recompute greedy matching from scratch for one image."""
    used = set()
    tp = 0
    for k in sorted(range(len(dets)), key=lambda i: (-dets[i][4], i)):
        best, bj = -1.0, -1
        for j, g in enumerate(gts):
            if j in used:
                continue
            iou = box_iou(dets[k][:4], g)[0, 0]
            if iou > best:
                best, bj = iou, j
        if bj >= 0 and best >= thr:
            used.add(bj)
            tp += 1
    return tp


def brute_ap(dets_per_image, gts_per_image, thr):
    flat = [(d[4], i, n) for i, ds in enumerate(dets_per_image) for n, d in enumerate(ds)]
    flat.sort(key=lambda t: -t[0])  # stable: ties keep image/detection order
    n_gt = sum(len(g) for g in gts_per_image)
    points = []
    for k in range(1, len(flat) + 1):
        keep = {(i, n) for _, i, n in flat[:k]}
        tp = sum(
            brute_match_count([d for n, d in enumerate(ds) if (i, n) in keep], gts_per_image[i], thr)
            for i, ds in enumerate(dets_per_image)
        )
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        ps = [p for rc, p in points if rc >= r]
        total += max(ps) if ps else 0.0
    return total / 101


def brute_f1(dets_per_image, gts_per_image, thr):
    n_gt = sum(len(g) for g in gts_per_image)
    best = 0.0
    for t in sorted({d[4] for ds in dets_per_image for d in ds}):
        sel = [[d for d in ds if d[4] >= t] for ds in dets_per_image]
        tp = sum(brute_match_count(s, g, thr) for s, g in zip(sel, gts_per_image))
        nd = sum(len(s) for s in sel)
        best = max(best, 2 * tp / (nd + n_gt))
    return best


def random_case(rng, n_img=3):
    dets, gts = [], []
    for _ in range(n_img):
        m = int(rng.integers(1, 5))
        size = rng.uniform(6, 20, (m, 1))
        g = np.c_[rng.uniform(10, 54, (m, 2)), size, size]
        nd = int(rng.integers(0, 7))
        jitter = g[rng.integers(0, len(g), nd)] + rng.normal(0, 3, (nd, 4)) * [1, 1, 0.5, 0.5]
        jitter[:, 2:] = np.abs(jitter[:, 2:]) + 1
        scores = np.round(rng.random(nd), 1)  # coarse scores create ties
        dets.append(np.c_[jitter, scores])
        gts.append(g)
    return dets, gts


@pytest.mark.parametrize("seed", range(25))
def test_ap_and_f1_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng)
    if sum(len(d) for d in dets) == 0:
        return
    for thr in (0.3, 0.5, 0.75):
        assert average_precision(dets, gts, thr).ap == pytest.approx(brute_ap(dets, gts, thr), abs=1e-12)
        assert best_f1(dets, gts, thr)[0] == pytest.approx(brute_f1(dets, gts, thr), abs=1e-12)


def test_perfect_and_empty_cases():
    g = [np.array([[10, 10, 5, 5], [30, 30, 8, 8]])]
    d = [np.array([[10, 10, 5, 5, 0.9], [30, 30, 8, 8, 0.8]])]
    assert average_precision(d, g).ap == pytest.approx(1.0)
    assert best_f1(d, g) == (1.0, 0.8)
    r = average_precision([np.zeros((0, 5))], [np.zeros((0, 4))])
    assert r.ap == 1.0 and r.empty
    assert average_precision(d, [np.zeros((0, 4))]).ap == 0.0
    assert average_precision([np.zeros((0, 5))], g).ap == 0.0


def test_duplicate_is_false_positive():
    g = [np.array([[10, 10, 5, 5]])]
    d = [np.array([[10, 10, 5, 5, 0.9], [10, 10, 5, 5, 0.8]])]
    m = match_detections(d[0], g[0])
    assert list(m.tp) == [True, False]
    # precision 1 up to recall 1 -> the later duplicate does not lower AP
    assert average_precision(d, g).ap == pytest.approx(1.0)
    assert best_f1(d, g)[0] == pytest.approx(1.0)


def test_higher_score_claims_gt_first():
    g = np.array([[10, 10, 10, 10]])
    d = np.array([[11, 10, 10, 10, 0.2], [12, 10, 10, 10, 0.9]])
    m = match_detections(d, g)
    assert list(m.tp) == [False, True]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_bounds_and_monotone_in_iou(seed):
    dets, gts = random_case(np.random.default_rng(seed))
    aps = [average_precision(dets, gts, t).ap for t in (0.1, 0.5, 0.9)]
    assert all(0 <= a <= 1 for a in aps)
    assert aps[0] >= aps[1] >= aps[2]


def test_evaluate_report():
    g = [np.array([[10, 10, 5, 5]]), np.array([[30, 30, 8, 8]])]
    d = [np.array([[10, 10, 5, 5, 0.9]]), np.array([[50, 50, 8, 8, 0.7]])]
    rep = evaluate(d, g)
    assert rep.map50 == pytest.approx(51 / 101)
    assert rep.n_gt == 2 and rep.n_det == 2 and rep.n_images == 2
    assert "mAP@0.5" in rep.text()
