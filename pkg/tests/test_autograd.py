import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqpcd import autograd as ag
from aqpcd.tensor import ConvSpec

TOL = 1e-4


def p(rng, *shape, lo=None):
    d = rng.normal(size=shape)
    if lo is not None:
        d = np.abs(d) + lo
    return ag.Var(d, requires_grad=True)


UNARY = {
    "square": (ag.square, None),
    "exp": (ag.exp, None),
    "log": (ag.log, 0.5),
    "sqrt": (ag.sqrt, 0.5),
    "atan": (ag.atan, None),
    "sigmoid": (ag.sigmoid, None),
    "silu": (ag.silu, None),
    "neg": (ag.neg, None),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    fn, lo = UNARY[name]
    x = p(rng, 3, 4, lo=lo)
    w = rng.normal(size=(3, 4))
    err = ag.gradcheck(lambda: ag.vsum(fn(x) * w), {"x": x}, samples=None)
    assert err["x"] < TOL


@pytest.mark.parametrize("op", [ag.add, ag.sub, ag.mul, ag.div, ag.maximum, ag.minimum])
def test_binary_gradients_with_broadcast(rng, op):
    a = p(rng, 2, 3, 4)
    b = p(rng, 3, 1, lo=0.5 if op is ag.div else None)
    w = rng.normal(size=(2, 3, 4))
    err = ag.gradcheck(lambda: ag.vsum(op(a, b) * w), {"a": a, "b": b}, samples=None)
    assert max(err.values()) < TOL


def test_structural_op_gradients(rng):
    a, b = p(rng, 2, 3, 4, 4), p(rng, 2, 2, 4, 4)
    w = rng.normal(size=(2, 5, 4, 4))

    def f():
        c = ag.concat_channels(a, b)
        c = ag.elementwise_mul(c, ag.sigmoid(c))
        c = ag.elementwise_add(c, c)
        r = ag.reshape(c, (2, -1))
        return ag.vmean(ag.getitem(r, (slice(None), slice(3, 40)))) + ag.vsum(c * w)

    assert max(ag.gradcheck(f, {"a": a, "b": b}, samples=12).values()) < TOL


def test_clamp_and_bce_gradients(rng):
    x = p(rng, 20)
    t = (rng.random(20) > 0.5).astype(float)
    err = ag.gradcheck(lambda: ag.vsum(ag.bce_with_logits(x, t)) + ag.vsum(ag.clamp(x, -0.5, 0.7) * 3.0), {"x": x}, samples=None)
    assert err["x"] < TOL


def test_bce_matches_closed_form():
    z = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
    t = np.array([0.0, 1.0, 0.5, 0.0, 1.0])
    ref = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    np.testing.assert_allclose(ag.bce_with_logits(ag.Var(z), t).numpy(), ref)


@pytest.mark.parametrize("k,s,g", [(3, 1, 1), (3, 2, 1), (1, 1, 1), (3, 1, 3), (3, 2, 3)])
def test_conv_gradients(rng, k, s, g):
    spec = ConvSpec(k, 3, 3 if g == 3 else 4, s, k // 2, g)
    x, w, b = p(rng, 2, 3, 6, 6), p(rng, *spec.weight_shape), p(rng, spec.out_channels)
    gy = rng.normal(size=(2, spec.out_channels, *spec.output_hw(6, 6)))
    err = ag.gradcheck(lambda: ag.vsum(ag.conv2d(x, w, b, spec) * gy), {"x": x, "w": w, "b": b}, samples=10)
    assert max(err.values()) < TOL


@pytest.mark.parametrize("training", [False, True])
def test_batch_norm_gradients(rng, training):
    x, g, b = p(rng, 4, 3, 3, 3), p(rng, 3), p(rng, 3)
    rm, rv = rng.normal(size=3), np.abs(rng.normal(size=3)) + 0.5
    w = rng.normal(size=(4, 3, 3, 3))

    def f():
        return ag.vsum(ag.batch_norm(x, g, b, rm.copy(), rv.copy(), eps=1e-5, training=training)[0] * w)

    assert max(ag.gradcheck(f, {"x": x, "g": g, "b": b}, samples=10).values()) < TOL


def test_fake_quant_ste_gradient(rng):
    x = p(rng, 50)
    w = rng.normal(size=50)
    scale, zp = 0.02, 3
    with ag.ste_surrogate():
        err = ag.gradcheck(lambda: ag.vsum(ag.fake_quant(x, scale, zp) * w), {"x": x}, samples=None)
    assert err["x"] < TOL


def test_fake_quant_forward_and_mask():
    x = ag.Var(np.array([-20.0, -0.26, 0.0, 0.24, 0.25, 20.0]), requires_grad=True)
    with ag.GradientTape({"x": x}) as tape:
        y = ag.fake_quant(x, 0.1, 0, -128, 127)
        loss = ag.vsum(y)
    np.testing.assert_allclose(y.numpy(), [-12.8, -0.3, 0.0, 0.2, 0.3, 12.7])
    g = ag.backward(tape, loss)["x"]
    np.testing.assert_array_equal(g, [0, 1, 1, 1, 1, 0])


def test_unused_parameter_gets_zero_or_strict_error(rng):
    a, b = p(rng, 3), p(rng, 3)
    with ag.GradientTape({"a": a, "b": b}) as tape:
        loss = ag.vsum(a * 2.0)
    g = ag.backward(tape, loss)
    np.testing.assert_array_equal(g["b"], 0.0)
    with ag.GradientTape({"a": a, "b": b}) as tape:
        loss = ag.vsum(a * 2.0)
    with pytest.raises(ag.DetachedGraphError):
        ag.backward(tape, loss, strict=True)


def test_adamw_first_step_moves_by_lr(rng):
    w = ag.Var(np.array([1.0, -2.0]), requires_grad=True)
    st_ = ag.OptimizerState(weight_decay=0.0)
    ag.adamw_step(st_, {"w": w}, {"w": np.array([0.3, -5.0])}, lr=0.1)
    np.testing.assert_allclose(w.data, [0.9, -1.9], atol=1e-6)


def test_adamw_decay_is_decoupled():
    w = ag.Var(np.array([2.0]), requires_grad=True)
    st_ = ag.OptimizerState(weight_decay=0.5)
    ag.adamw_step(st_, {"w": w}, {"w": np.array([0.0])}, lr=0.1)
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05))
    v = ag.Var(np.array([2.0]), requires_grad=True)
    ag.adamw_step(ag.OptimizerState(weight_decay=0.5), {"v": v}, {"v": np.array([0.0])}, lr=0.1, no_decay=["v"])
    assert v.data[0] == 2.0


def test_adamw_rejects_nonfinite():
    w = ag.Var(np.array([1.0]), requires_grad=True)
    with pytest.raises(ag.NonFiniteGradientError):
        ag.adamw_step(ag.OptimizerState(), {"w": w}, {"w": np.array([np.nan])}, lr=0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert ag.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


def test_lr_schedule_values():
    s = ag.LrSchedule(1e-3, 0.1, 100)
    assert ag.lr_at(s, 0) == 1e-3
    assert ag.lr_at(s, 100) == pytest.approx(1e-4)
    assert ag.lr_at(s, 50) == pytest.approx(1e-3 * 10**-0.5)
    stair = ag.LrSchedule(1e-3, 0.1, 100, staircase=True)
    assert ag.lr_at(stair, 99) == 1e-3
    assert ag.lr_at(stair, 100) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        ag.LrSchedule(1e-3, 1.5)


@given(st.floats(1e-5, 1.0), st.floats(0.01, 1.0), st.integers(1, 200), st.integers(0, 400))
def test_lr_monotone_nonincreasing(lr0, gamma, d, e):
    s = ag.LrSchedule(lr0, gamma, d)
    assert ag.lr_at(s, e + 1) <= ag.lr_at(s, e) * (1 + 1e-12)


def test_early_stop():
    assert not ag.early_stop([0.1, 0.2, 0.3], 2)
    assert ag.early_stop([0.3, 0.2, 0.2], 2)
    assert not ag.early_stop([0.3, 0.2, 0.31], 2)
    assert ag.early_stop([1.0, 2.0, 3.0], 2, mode="min")
    # ties do not count as improvement
    assert ag.early_stop([0.5, 0.5, 0.5], 2)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 10_000))
def test_conv_gradcheck_random_shapes(cin, cout, hw, seed):
    r = np.random.default_rng(seed)
    spec = ConvSpec(3, cin, cout, 1, 1)
    x, w = ag.Var(r.normal(size=(1, cin, hw, hw)), True), ag.Var(r.normal(size=spec.weight_shape), True)
    gy = r.normal(size=(1, cout, hw, hw))
    err = ag.gradcheck(lambda: ag.vsum(ag.conv2d(x, w, None, spec) * gy), {"x": x, "w": w}, samples=4, rng=r)
    assert max(err.values()) < TOL
