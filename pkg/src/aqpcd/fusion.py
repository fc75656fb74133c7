"""Adaptive multi-sensor fusion: per-modality sigmoid attention gating.

At each pyramid level the optical and DEM feature maps pass through their
own attention sub-network; each map is scaled elementwise by its mask and
the two weighted maps are concatenated (or summed, for ablation).
"""

from __future__ import annotations

import csv
import io

import numpy as np

from . import autograd as ag
from . import quant as Q
from .autograd import Var
from .backbone import FeaturePyramid
from .layers import ConvBnAct, Module, QConv, QTensor
from .tensor import ConvSpec, ShapeError

MODALITIES = ("oi", "dem")
SCALES = ("p3", "p4", "p5")


class AttentionSubNetwork(Module):
    """3x3 ConvBnAct (channel preserving) -> 1x1 conv -> sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.block = ConvBnAct(ConvSpec(3, channels, channels, 1, 1), rng)
        self.gate = ConvBnAct(ConvSpec(1, channels, channels), rng, bn=False, act="sigmoid")

    def forward(self, f: Var) -> Var:
        return self.gate(self.block(f))

    __call__ = forward

    def convs(self):
        return [self.block, self.gate]


class AWM(Module):
    """Adaptive weighting for one pyramid level."""

    def __init__(self, channels: int, rng: np.random.Generator, combine: str = "concat"):
        super().__init__()
        if combine not in ("concat", "sum"):
            raise ValueError(f"unknown combiner {combine!r}")
        self.combine = combine
        self.att_oi = AttentionSubNetwork(channels, rng)
        self.att_dem = AttentionSubNetwork(channels, rng)
        self.mul_oi_obs = Q.MinMaxObserver()
        self.mul_dem_obs = Q.MinMaxObserver()
        self.out_obs = Q.MinMaxObserver()

    def local_observers(self):
        return {"mul_oi_obs": self.mul_oi_obs, "mul_dem_obs": self.mul_dem_obs, "out_obs": self.out_obs}

    def forward(self, f_oi: Var, f_dem: Var, trace: dict | None = None) -> Var:
        if f_oi.shape != f_dem.shape:
            raise ShapeError("awm_fuse", "feature shape", f_oi.shape, f_dem.shape)
        a_oi = self.att_oi(f_oi)
        a_dem = self.att_dem(f_dem)
        w_oi = self.observe(ag.mul(f_oi, a_oi), self.mul_oi_obs)
        w_dem = self.observe(ag.mul(f_dem, a_dem), self.mul_dem_obs)
        fused = ag.concat([w_oi, w_dem], axis=1) if self.combine == "concat" else ag.add(w_oi, w_dem)
        fused = self.observe(fused, self.out_obs)
        if trace is not None:
            trace.update(A_oi=a_oi.data, A_dem=a_dem.data, F_weighted_oi=w_oi.data, F_weighted_dem=w_dem.data, F_fused=fused.data)
        return fused

    __call__ = forward

    def convs(self):
        return self.att_oi.convs() + self.att_dem.convs()

    def quantize(self, p_oi: Q.QuantParams, p_dem: Q.QuantParams) -> "QAWM":
        qa = [self.att_oi.block.quantize(p_oi)]
        qa.append(self.att_oi.gate.quantize(qa[0].layer.output))
        qd = [self.att_dem.block.quantize(p_dem)]
        qd.append(self.att_dem.gate.quantize(qd[0].layer.output))
        return QAWM(qa, qd, self.mul_oi_obs.params(), self.mul_dem_obs.params(), self.out_obs.params(), self.combine)

    def describe(self, name: str, in_oi: str, in_dem: str) -> list[dict]:
        rows = []
        outs = []
        for mod, inp, sub in (("oi", in_oi, self.att_oi), ("dem", in_dem, self.att_dem)):
            rows += sub.block.describe(f"{name}.att_{mod}.block", inp)
            rows += sub.gate.describe(f"{name}.att_{mod}.gate", rows[-1]["output"])
            rows.append({"name": f"{name}.mul_{mod}", "kind": "mul", "inputs": [inp, rows[-1]["output"]], "output": f"{name}.mul_{mod}", "fake_quant": self.qat})
            outs.append(rows[-1]["output"])
        kind = "concat" if self.combine == "concat" else "add"
        rows.append({"name": f"{name}.fuse", "kind": kind, "inputs": outs, "output": f"{name}.fuse", "fake_quant": self.qat})
        return rows


class QAWM:
    def __init__(self, att_oi: list[QConv], att_dem: list[QConv], p_mul_oi, p_mul_dem, p_out, combine="concat"):
        self.att_oi, self.att_dem = att_oi, att_dem
        self.p_mul_oi, self.p_mul_dem, self.p_out = p_mul_oi, p_mul_dem, p_out
        self.combine = combine

    def __call__(self, f_oi: QTensor, f_dem: QTensor, trace: dict | None = None) -> QTensor:
        a_oi = self.att_oi[1](self.att_oi[0](f_oi))
        a_dem = self.att_dem[1](self.att_dem[0](f_dem))
        w_oi = Q.int8_mul(f_oi.q, f_oi.p, a_oi.q, a_oi.p, self.p_mul_oi)
        w_dem = Q.int8_mul(f_dem.q, f_dem.p, a_dem.q, a_dem.p, self.p_mul_dem)
        if self.combine == "concat":
            q = Q.int8_concat(w_oi, self.p_mul_oi, w_dem, self.p_mul_dem, self.p_out)
        else:
            q = Q.int8_add(w_oi, self.p_mul_oi, w_dem, self.p_mul_dem, self.p_out)
        if trace is not None:
            trace.update(A_oi=a_oi, A_dem=a_dem)
        return QTensor(q, self.p_out)


def awm_fuse(f_oi, f_dem, awm: AWM, trace: dict | None = None) -> Var:
    """Gate each modality with its own attention map and fuse the results."""
    f_oi = f_oi if isinstance(f_oi, Var) else Var(f_oi)
    f_dem = f_dem if isinstance(f_dem, Var) else Var(f_dem)
    return awm(f_oi, f_dem, trace)


def fuse_pyramids(oi: FeaturePyramid, dem: FeaturePyramid, awms: list[AWM], traces: list | None = None) -> FeaturePyramid:
    """Apply the scale-specific AWM at P3, P4 and P5 independently."""
    if len(awms) != 3:
        raise ValueError("need one AWM per pyramid level")
    out = []
    for i, (a, b, m) in enumerate(zip(oi.levels(), dem.levels(), awms)):
        tr = {} if traces is not None else None
        out.append(awm_fuse(a, b, m, tr))
        if traces is not None:
            traces.append(tr)
    return FeaturePyramid(*out)


def attention_summary(model, oi: np.ndarray, dem: np.ndarray, tile_ids=None, batch: int = 32) -> list[dict]:
    """Mean attention per tile, scale and modality.

    Works for the float :class:`~aqpcd.model.Detector` and for the integer
    :class:`~aqpcd.model.QuantizedDetector` (masks are dequantized).
    """
    tile_ids = list(range(len(oi))) if tile_ids is None else list(tile_ids)
    rows = []
    for start in range(0, len(oi), batch):
        sl = slice(start, start + batch)
        traces: list[dict] = []
        model.predict(oi[sl], dem[sl], traces=traces)
        for s_idx, tr in enumerate(traces):
            for mod in MODALITIES:
                a = tr[f"A_{mod}"]
                if isinstance(a, QTensor):
                    a = Q.dequantize(a.q, a.p)
                means = a.reshape(a.shape[0], -1).mean(axis=1)
                for k, m in enumerate(means):
                    key = (start + k, s_idx, MODALITIES.index(mod))
                    rows.append((key, {"tile_id": tile_ids[start + k], "scale": SCALES[s_idx], "modality": mod, "mean_attention": float(m)}))
    rows.sort(key=lambda r: r[0])
    return [r for _, r in rows]


def attention_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["tile_id", "scale", "modality", "mean_attention"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "mean_attention": f"{r['mean_attention']:.6f}"})
    return buf.getvalue()
