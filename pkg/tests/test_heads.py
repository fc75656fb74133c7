import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqpcd import autograd as ag
from aqpcd.autograd import Var
from aqpcd.heads import (
    Detection, Head, LossConfig, assign_targets, band_of, bce, box_iou, ciou, ciou_loss,
    combine_head_losses, composite_loss, decode, decode_and_nms, format_detections, head_forward,
    nms, parse_detections,
)
from aqpcd.tensor import ShapeError

LOG2 = math.log(2.0)


def ciou_reference(p, g):
    """Scalar CIoU from corner coordinates."""
    (px, py, pw, ph), (gx, gy, gw, gh) = p, g
    ix = max(0.0, min(px + pw / 2, gx + gw / 2) - max(px - pw / 2, gx - gw / 2))
    iy = max(0.0, min(py + ph / 2, gy + gh / 2) - max(py - ph / 2, gy - gh / 2))
    inter = ix * iy
    iou = inter / (pw * ph + gw * gh - inter)
    cw = max(px + pw / 2, gx + gw / 2) - min(px - pw / 2, gx - gw / 2)
    ch = max(py + ph / 2, gy + gh / 2) - min(py - ph / 2, gy - gh / 2)
    rho2 = (px - gx) ** 2 + (py - gy) ** 2
    v = 4 / math.pi**2 * (math.atan(gw / gh) - math.atan(pw / ph)) ** 2
    alpha = v / (1 - iou + v) if v > 0 else 0.0
    return iou - rho2 / (cw**2 + ch**2) - alpha * v


box = st.tuples(st.floats(0, 64), st.floats(0, 64), st.floats(0.5, 60), st.floats(0.5, 60))


@settings(max_examples=200)
@given(box, box)
def test_ciou_matches_reference_and_bounds(p, g):
    loss = ciou_loss(p, g)
    assert loss == pytest.approx(1 - ciou_reference(p, g), abs=1e-7)
    assert -1e-12 <= loss < 2.5


def test_ciou_identical_and_disjoint():
    assert ciou_loss((10, 10, 4, 6), (10, 10, 4, 6)) == pytest.approx(0.0, abs=1e-12)
    # disjoint unit squares 2 apart: IoU 0, rho^2 = 4, c^2 = 3^2 + 1^2
    assert ciou_loss((0, 0, 1, 1), (2, 0, 1, 1)) == pytest.approx(1 + 4 / 10)
    with pytest.raises(ValueError):
        ciou_loss((0, 0, 0, 1), (0, 0, 1, 1))


def test_ciou_gradients(rng):
    pred = [Var(rng.uniform(5, 20, 6), requires_grad=True) for _ in range(4)]
    gt = tuple(rng.uniform(5, 20, 6) for _ in range(4))
    params = {f"p{k}": v for k, v in enumerate(pred)}
    err = ag.gradcheck(lambda: ag.vsum(ciou(tuple(pred), gt)), params, samples=None)
    assert max(err.values()) < 1e-4


def test_bce_values():
    assert bce(0.0, 1.0) == pytest.approx(LOG2)
    assert bce(100.0, 1.0) == pytest.approx(0.0, abs=1e-40)
    assert bce(-100.0, 1.0) == pytest.approx(100.0)
    assert np.isfinite(bce(1e4, 0.0))


def test_band_boundaries():
    assert band_of(16.0) == "p3"
    assert band_of(16.0001) == "p4"
    assert band_of(48.0) == "p4"
    assert band_of(48.5) == "p5"


def test_assign_targets_cells_and_collisions():
    boxes = [np.array([[5.0, 9.0, 10, 10], [6.0, 10.0, 12, 12], [40, 20, 30, 30], [60, 60, 50, 50], [70, 5, 8, 8]])]
    t, stats = assign_targets(boxes, (64, 64))
    assert t["p3"].num_pos == 1 and (t["p3"].rows[0], t["p3"].cols[0]) == (2, 1)
    assert stats.collisions == 1 and stats.skipped == 1
    assert (t["p4"].rows[0], t["p4"].cols[0]) == (2, 5)
    assert (t["p5"].rows[0], t["p5"].cols[0]) == (3, 3)
    assert t["p3"].obj.shape == (1, 16, 16) and t["p3"].obj.sum() == 1


def zero_outputs(n=1, hw=64):
    return {s: Var(np.zeros((n, 6, hw // st, hw // st))) for s, st in (("p3", 4), ("p4", 8), ("p5", 16))}


def test_combine_unit_losses():
    assert combine_head_losses({"p3": 1.0, "p4": 1.0, "p5": 1.0}, 2.0) == 4.0
    assert combine_head_losses({"p3": 0.5, "p4": 2.0, "p5": 0.25}, 3.0) == 3.75


def test_composite_loss_hand_computed_empty():
    t, _ = assign_targets([np.zeros((0, 4))], (64, 64))
    lb = composite_loss(zero_outputs(), t, LossConfig(w_s=2.0))
    assert lb.total == pytest.approx(4 * LOG2, rel=1e-12)
    assert all(lb.empty.values())
    assert lb.per_head["p4"]["loc"] == 0.0


def test_composite_loss_hand_computed_perfect_box():
    # zero logits decode to a stride-sized box at the cell centre: CIoU = 1
    t, _ = assign_targets([np.array([[6.0, 10.0, 4.0, 4.0]])], (64, 64))
    cfg = LossConfig(lambda_loc=1.0, lambda_obj=1.0, lambda_cls=0.5, w_s=2.0)
    lb = composite_loss(zero_outputs(), t, cfg)
    assert lb.per_head["p3"]["loc"] == pytest.approx(0.0, abs=1e-12)
    assert lb.per_head["p3"]["cls"] == pytest.approx(LOG2)
    p3 = LOG2 + 0.5 * LOG2
    assert lb.total == pytest.approx(2 * p3 + 2 * LOG2, rel=1e-12)


def test_obj_pos_weight():
    t, _ = assign_targets([np.array([[6.0, 10.0, 4.0, 4.0]])], (64, 64))
    lb = composite_loss(zero_outputs(), t, LossConfig(obj_pos_weight=5.0))
    # 256 cells, one of them weighted 5
    assert lb.per_head["p3"]["obj"] == pytest.approx(LOG2 * (255 + 5) / 256)
    with pytest.raises(ValueError):
        LossConfig(obj_pos_weight=0.0)


def test_w_s_scales_only_p3_gradient(rng):
    boxes = [np.array([[6.0, 10.0, 5.0, 7.0], [30.0, 30.0, 30.0, 25.0]])]
    t, _ = assign_targets(boxes, (64, 64))
    outs = {s: Var(rng.normal(0, 0.5, v.shape), requires_grad=True) for s, v in zero_outputs().items()}

    def grads(w_s):
        with ag.GradientTape(outs) as tape:
            lb = composite_loss(outs, t, LossConfig(w_s=w_s))
        return ag.backward(tape, lb.total_var)

    g1, g3 = grads(1.0), grads(3.0)
    np.testing.assert_allclose(g3["p3"], 3.0 * g1["p3"], rtol=1e-12)
    np.testing.assert_array_equal(g3["p4"], g1["p4"])
    np.testing.assert_array_equal(g3["p5"], g1["p5"])


def test_loss_gradcheck(rng):
    boxes = [np.array([[6.0, 10.0, 5.0, 7.0], [30.0, 30.0, 30.0, 25.0], [40, 40, 60, 50]])]
    t, _ = assign_targets(boxes, (64, 64))
    outs = {s: Var(rng.normal(0, 0.5, v.shape), requires_grad=True) for s, v in zero_outputs().items()}
    err = ag.gradcheck(lambda: composite_loss(outs, t, LossConfig(obj_pos_weight=3.0)).total_var, outs, samples=20)
    assert max(err.values()) < 1e-4


def test_head_shapes(rng):
    h = Head(8, 4, rng)
    out = head_forward(rng.normal(size=(2, 8, 4, 4)).astype(np.float32), h)
    assert out.shape == (2, 6, 4, 4)
    with pytest.raises(ShapeError):
        head_forward(np.zeros((1, 3, 4, 4), np.float32), h)


def test_decode_and_nms():
    outs = {s: np.full((1, 6, 64 // st, 64 // st), -10.0) for s, st in (("p3", 4), ("p4", 8), ("p5", 16))}
    outs["p3"][0, :, 2, 1] = [0, 0, 0, 0, 5, 5]
    outs["p3"][0, :, 2, 2] = [0, 0, 0, 0, 4, 4]  # adjacent cell, IoU 1/3 with the first
    outs["p4"][0, :, 1, 0] = [0, 0, -1, -1, 3, 3]  # small box near the first one
    dets = decode(outs, (64, 64), 0.25)[0]
    assert len(dets) == 3
    d = max(dets, key=lambda d: d.score)
    assert (d.cx, d.cy, d.w, d.h) == (6.0, 10.0, 4.0, 4.0)
    kept = decode_and_nms(outs, (64, 64), 0.25, 0.3)[0]
    assert kept[0].score >= kept[-1].score
    with pytest.raises(ValueError):
        decode_and_nms(outs, (64, 64), 0.0, 0.5)


def test_nms_oracle(rng):
    dets = [Detection(*rng.uniform(10, 50, 2), *rng.uniform(4, 20, 2), float(rng.random()), 1.0) for _ in range(40)]
    kept = nms(dets, 0.4)
    boxes = np.array([d.box() for d in kept])
    iou = box_iou(boxes, boxes)
    np.fill_diagonal(iou, 0)
    assert iou.max() <= 0.4
    # every dropped box overlaps a kept box that scores at least as high
    for d in dets:
        if any(d is k for k in kept):
            continue
        assert any(box_iou(d.box(), k.box())[0, 0] > 0.4 and k.score >= d.score for k in kept)


def test_box_iou_values():
    assert box_iou([0, 0, 2, 2], [1, 0, 2, 2])[0, 0] == pytest.approx(1 / 3)
    assert box_iou([0, 0, 2, 2], [10, 0, 2, 2])[0, 0] == 0.0


def test_detection_text_round_trip():
    dets = [Detection(1.5, 2.25, 3.0, 4.0, 0.5, 0.5)]
    text = format_detections("000007", dets)
    assert text == "000007 1.500 2.250 3.000 4.000 0.250000\n"
    assert parse_detections(text) == {"000007": [(1.5, 2.25, 3.0, 4.0, 0.25)]}
