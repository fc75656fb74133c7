import numpy as np
import pytest

from aqpcd import autograd as ag
from aqpcd import quant as Q
from aqpcd.autograd import Var
from aqpcd.backbone import STRIDES, Backbone, BackboneConfig, Bottleneck, backbone_forward
from aqpcd.layers import ConvBnAct
from aqpcd.tensor import ConvSpec, ShapeError

SMALL = BackboneConfig(4, (8, 8, 16), (1, 2, 1))


def test_pyramid_shapes_and_strides(rng):
    bb = Backbone(SMALL, rng)
    x = Var(rng.normal(size=(2, 1, 64, 48)).astype(np.float32))
    pyr = backbone_forward(x, bb)
    for level, stride, c in zip(pyr.levels(), STRIDES, SMALL.stage_channels):
        assert level.shape == (2, c, 64 // stride, 48 // stride)


def test_default_pyramid_shapes(rng):
    pyr = Backbone(BackboneConfig(), rng)(Var(np.zeros((1, 1, 64, 64), np.float32)))
    assert [lv.shape for lv in pyr.levels()] == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4)]


def test_backbone_rejects_bad_input(rng):
    bb = Backbone(SMALL, rng)
    with pytest.raises(ShapeError):
        bb(Var(np.zeros((1, 1, 40, 40), np.float32)))
    with pytest.raises(ShapeError):
        bb(Var(np.zeros((1, 2, 64, 64), np.float32)))


def test_bottleneck_skip_rules(rng):
    assert Bottleneck(8, 8, 1, rng).use_skip
    assert not Bottleneck(8, 8, 2, rng).use_skip
    assert not Bottleneck(8, 16, 1, rng).use_skip
    b = Bottleneck(4, 4, 1, rng)
    assert b.depthwise.spec.depthwise and b.depthwise.spec.in_channels == 8


def test_bottleneck_gradients(rng):
    b = Bottleneck(2, 2, 1, rng)
    for p in b.params().values():
        p.data = p.data.astype(np.float64)
    b.eval()
    x = Var(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    gy = rng.normal(size=(1, 2, 5, 5))
    params = {**b.params(), "x": x}
    err = ag.gradcheck(lambda: ag.vsum(b(x) * gy), params, samples=4)
    assert max(err.values()) < 1e-4


def test_fold_equivalence_100_layers():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        k = int(rng.choice([1, 3]))
        cin = int(rng.integers(1, 7))
        dw = bool(rng.random() < 0.3)
        spec = ConvSpec(k, cin, cin if dw else int(rng.integers(1, 7)), int(rng.integers(1, 3)), k // 2, cin if dw else 1)
        layer = ConvBnAct(spec, rng, act=str(rng.choice(["none", "silu"])))
        c = spec.out_channels
        layer.gamma.data = rng.normal(1, 0.3, c).astype(np.float32)
        layer.beta.data = rng.normal(0, 0.3, c).astype(np.float32)
        layer.running_mean = rng.normal(0, 0.5, c).astype(np.float32)
        layer.running_var = rng.uniform(0.2, 2, c).astype(np.float32)
        layer.eval()
        x = Var(rng.normal(size=(2, cin, 8, 8)).astype(np.float32))
        ref = layer(x).data
        layer.fuse()
        worst = max(worst, float(np.max(np.abs(layer(x).data - ref))))
    assert worst < 1e-5


def test_quantized_backbone_tracks_float(rng):
    bb = Backbone(SMALL, rng)
    x = rng.normal(size=(4, 1, 32, 32)).astype(np.float32)
    bb.set_calibrating(True)
    bb(Var(x))
    bb.set_calibrating(False)
    p_in = Q.calibrate_minmax(x)
    qbb = bb.quantize(p_in)
    from aqpcd.layers import QTensor

    pyr = qbb(QTensor(Q.quantize(x, p_in), p_in))
    ref = bb(Var(x))
    for q, f in zip(pyr.levels(), ref.levels()):
        deq = Q.dequantize(q.q, q.p)
        # error stays within a few output steps after several layers
        assert np.mean(np.abs(deq - f.data)) < 4 * float(q.p.scale)
