import numpy as np
import pytest

from aqpcd import autograd as ag
from aqpcd import tensor as T
from aqpcd.autograd import Var
from aqpcd.fusion import AWM, awm_fuse, attention_csv, attention_summary
from aqpcd.tensor import ShapeError


def randomize(awm, rng):
    for sub in (awm.att_oi, awm.att_dem):
        b = sub.block
        c = b.spec.out_channels
        b.gamma.data = rng.normal(1, 0.3, c).astype(np.float32)
        b.beta.data = rng.normal(0, 0.3, c).astype(np.float32)
        b.running_mean = rng.normal(0, 0.3, c).astype(np.float32)
        b.running_var = rng.uniform(0.5, 2, c).astype(np.float32)
        sub.gate.bias.data = rng.normal(0, 1, c).astype(np.float32)


def attention_oracle(f, sub):
    """One modality, step by step: 3x3 conv, BN, SiLU, 1x1 conv, sigmoid."""
    b, g = sub.block, sub.gate
    h = T.conv2d(f, b.weight.data, None, b.spec)
    h = T.batch_norm(h, b.gamma.data, b.beta.data, b.running_mean, b.running_var, b.eps)
    h = T.silu(h)
    a = T.conv2d(h, g.weight.data, g.bias.data, g.spec)
    return T.sigmoid(a)


def awm_oracle(f_oi, f_dem, awm):
    a_oi = attention_oracle(f_oi, awm.att_oi)
    a_dem = attention_oracle(f_dem, awm.att_dem)
    w_oi = T.elementwise_mul(f_oi, a_oi)
    w_dem = T.elementwise_mul(f_dem, a_dem)
    return a_oi, a_dem, w_oi, w_dem, T.concat_channels(w_oi, w_dem)


@pytest.mark.parametrize("seed", range(5))
def test_awm_trace_matches_oracle_bit_exactly(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 9))
    awm = AWM(c, rng)
    randomize(awm, rng)
    awm.eval()
    shape = (int(rng.integers(1, 4)), c, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    f_oi = rng.normal(size=shape).astype(np.float32)
    f_dem = rng.normal(size=shape).astype(np.float32)
    trace = {}
    out = awm_fuse(f_oi, f_dem, awm, trace)
    ref = awm_oracle(f_oi, f_dem, awm)
    for key, r in zip(("A_oi", "A_dem", "F_weighted_oi", "F_weighted_dem", "F_fused"), ref):
        np.testing.assert_array_equal(trace[key], r, err_msg=key)
    np.testing.assert_array_equal(out.data, ref[-1])
    assert out.shape == (shape[0], 2 * c, *shape[2:])


def test_attention_is_a_probability(rng):
    awm = AWM(3, rng).eval()
    tr = {}
    awm_fuse(rng.normal(0, 50, (2, 3, 4, 4)), rng.normal(0, 50, (2, 3, 4, 4)), awm, tr)
    for k in ("A_oi", "A_dem"):
        assert tr[k].min() >= 0 and tr[k].max() <= 1


def test_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        awm_fuse(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)), AWM(3, rng))


def test_sum_combiner(rng):
    awm = AWM(2, rng, combine="sum").eval()
    tr = {}
    out = awm_fuse(rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3)), awm, tr)
    np.testing.assert_array_equal(out.data, tr["F_weighted_oi"] + tr["F_weighted_dem"])
    with pytest.raises(ValueError):
        AWM(2, rng, combine="max")


def test_awm_gradients_through_attention(rng):
    awm = AWM(2, rng)
    for p in awm.params().values():
        p.data = p.data.astype(np.float64)
    awm.eval()
    f_oi = Var(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    f_dem = Var(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    gy = rng.normal(size=(1, 4, 4, 4))
    params = {**awm.params(), "f_oi": f_oi, "f_dem": f_dem}
    err = ag.gradcheck(lambda: ag.vsum(awm(f_oi, f_dem) * gy), params, samples=4)
    assert max(err.values()) < 1e-4


def gate_off_dem(model):
    for awm in model.awms:
        awm.att_dem.gate.weight.data[:] = 0.0
        awm.att_dem.gate.bias.data[:] = -1e4  # sigmoid underflows to exactly 0


def test_gated_off_dem_makes_output_independent_of_dem(tiny_model, rng):
    m = tiny_model.eval()
    gate_off_dem(m)
    oi = rng.normal(size=(2, 1, 32, 32)).astype(np.float32)
    dem = rng.normal(size=(2, 1, 32, 32)).astype(np.float32)
    traces = []
    base = m.predict(oi, dem, traces=traces)
    for tr in traces:
        assert np.all(tr["A_dem"] == 0.0)
    for scale in (1e-3, 1.0, 1e3):
        other = m.predict(oi, dem + scale * rng.normal(size=dem.shape).astype(np.float32))
        for k in base:
            np.testing.assert_array_equal(base[k], other[k])


def test_attention_summary_rows(tiny_model, rng):
    oi = rng.normal(size=(3, 1, 32, 32)).astype(np.float32)
    rows = attention_summary(tiny_model.eval(), oi, oi, tile_ids=["a", "b", "c"], batch=2)
    assert len(rows) == 3 * 3 * 2
    assert rows[0]["tile_id"] == "a" and rows[0]["scale"] == "p3" and rows[0]["modality"] == "oi"
    text = attention_csv(rows)
    assert text.splitlines()[0] == "tile_id,scale,modality,mean_attention"
    assert all(0 <= r["mean_attention"] <= 1 for r in rows)
