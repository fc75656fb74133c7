"""Full dual-branch detector (float / QAT) and its integer-only counterpart."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quant as Q
from .autograd import Var
from .backbone import Backbone, BackboneConfig, QBackbone
from .fusion import AWM, QAWM, fuse_pyramids
from .heads import SCALES, Head, QHead
from .layers import ConvBnAct, Module, QConv, QTensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_channels: int = 32
    fusion: str = "concat"

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "head_channels": self.head_channels, "fusion": self.fusion}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(BackboneConfig.from_dict(d["backbone"]), d["head_channels"], d["fusion"])

    @property
    def fused_channels(self) -> tuple[int, int, int]:
        mult = 2 if self.fusion == "concat" else 1
        return tuple(c * mult for c in self.backbone.stage_channels)


def normalize_inputs(oi: np.ndarray, dem: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack rasters to ``(n, 1, H, W)`` float32.

    Optical values (in [0, 1]) are shifted by 0.5; each DEM is standardised
    to zero mean and unit variance (flat DEMs just lose their mean).
    """
    oi = np.asarray(oi, np.float32)
    dem = np.asarray(dem, np.float64)
    if oi.ndim == 2:
        oi, dem = oi[None], dem[None]
    if oi.ndim == 3:
        oi, dem = oi[:, None], dem[:, None]
    mean = dem.mean(axis=(1, 2, 3), keepdims=True)
    std = dem.std(axis=(1, 2, 3), keepdims=True)
    dem = (dem - mean) / np.where(std > 1e-12, std, 1.0)
    return (oi - 0.5).astype(np.float32), dem.astype(np.float32)


class Detector(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone_oi = Backbone(cfg.backbone, rng)
        self.backbone_dem = Backbone(cfg.backbone, rng)
        self.awms = [AWM(c, rng, cfg.fusion) for c in cfg.backbone.stage_channels]
        self.heads = [Head(c, cfg.head_channels, rng) for c in cfg.fused_channels]
        self.in_obs_oi = Q.MinMaxObserver()
        self.in_obs_dem = Q.MinMaxObserver()

    def local_observers(self):
        return {"in_obs_oi": self.in_obs_oi, "in_obs_dem": self.in_obs_dem}

    @property
    def fused(self) -> bool:
        return not any(c.bn for c in self.convs())

    def convs(self) -> list[ConvBnAct]:
        out = self.backbone_oi.convs() + self.backbone_dem.convs()
        for a in self.awms:
            out += a.convs()
        for h in self.heads:
            out += h.convs()
        return out

    def forward(self, oi, dem, traces: list | None = None) -> dict[str, Var]:
        oi = self.observe(oi if isinstance(oi, Var) else Var(oi), self.in_obs_oi)
        dem = self.observe(dem if isinstance(dem, Var) else Var(dem), self.in_obs_dem)
        p_oi = self.backbone_oi(oi)
        p_dem = self.backbone_dem(dem)
        fused = fuse_pyramids(p_oi, p_dem, self.awms, traces)
        return {s: head(f) for s, head, f in zip(SCALES, self.heads, fused.levels())}

    __call__ = forward

    def predict(self, oi: np.ndarray, dem: np.ndarray, traces: list | None = None, batch: int = 64) -> dict[str, np.ndarray]:
        """Eval-mode forward over normalised inputs, returning raw head outputs."""
        was = self.training
        self.eval()
        outs: dict[str, list] = {s: [] for s in SCALES}
        chunk_traces = []
        for start in range(0, len(oi), batch):
            tr = [] if traces is not None else None
            res = self.forward(oi[start : start + batch], dem[start : start + batch], tr)
            for s in SCALES:
                outs[s].append(res[s].data)
            if tr is not None:
                chunk_traces.append(tr)
        self.train(was)
        if traces is not None:
            traces.extend(_merge_traces(chunk_traces))
        return {s: np.concatenate(v) for s, v in outs.items()}

    def fuse(self) -> None:
        """Fold every BatchNorm into its conv (done once, before QAT)."""
        for c in self.convs():
            c.fuse()

    def calibrate(self, batches) -> None:
        """Run eval-mode forwards over ``(oi, dem)`` batches, updating observers."""
        was = self.training
        self.eval().set_calibrating(True)
        try:
            for oi, dem in batches:
                self.forward(oi, dem)
        finally:
            self.set_calibrating(False).train(was)

    def uncalibrated(self) -> list[str]:
        return [k for k, o in self.observers().items() if not o.calibrated]

    def enable_qat(self, batches=None) -> None:
        """Fold BN, calibrate observers from ``batches`` if given, turn on fake-quant."""
        self.fuse()
        if batches is not None:
            self.calibrate(batches)
        missing = self.uncalibrated()
        if missing:
            raise Q.CalibrationError(f"layer '{missing[0]}' is uncalibrated")
        self.set_qat(True)

    def state(self) -> dict[str, np.ndarray]:
        """Flat copy of parameters, buffers and observer ranges."""
        out = {f"param:{k}": v.data.copy() for k, v in self.params().items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers().items()})
        out.update({f"obs:{k}": np.array([o.lo, o.hi]) for k, o in self.observers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        bufs = self.buffers()
        obs = self.observers()
        expected = {f"param:{k}" for k in params} | {f"buffer:{k}" for k in bufs} | {f"obs:{k}" for k in obs}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, v in params.items():
            v.data = np.array(state[f"param:{k}"], dtype=v.data.dtype)
        owners = {}
        for m_name, m in self._named_modules():
            for b in m.local_buffers():
                owners[f"{m_name}{b}"] = (m, b)
        for k in bufs:
            m, b = owners[k]
            m.set_buffer(b, np.array(state[f"buffer:{k}"], np.float32))
        for k, o in obs.items():
            o.lo, o.hi = (float(x) for x in state[f"obs:{k}"])

    def _named_modules(self, prefix: str = ""):
        def walk(m, p):
            yield p, m
            for n, c in m.children():
                yield from walk(c, f"{p}{n}.")

        return list(walk(self, prefix))

    def describe(self) -> dict:
        rows = [
            {"name": "input_oi", "kind": "input", "inputs": [], "output": "input_oi", "cout": 1, "fake_quant": self.qat},
            {"name": "input_dem", "kind": "input", "inputs": [], "output": "input_dem", "cout": 1, "fake_quant": self.qat},
        ]
        r_oi, outs_oi = self.backbone_oi.describe("backbone_oi", "input_oi")
        r_dem, outs_dem = self.backbone_dem.describe("backbone_dem", "input_dem")
        rows += r_oi + r_dem
        for i, (awm, a, b) in enumerate(zip(self.awms, outs_oi, outs_dem)):
            rows += awm.describe(f"fusion.{SCALES[i]}", a, b)
        for s, head in zip(SCALES, self.heads):
            rows += head.describe(f"head.{s}", f"fusion.{s}.fuse")
        return {
            "config": self.cfg.to_dict(),
            "layers": rows,
            "outputs": {s: f"head.{s}.out" for s in SCALES},
            "qat": self.qat,
            "fused": self.fused,
            "quantized": False,
        }


def _merge_traces(chunks: list[list[dict]]) -> list[dict]:
    if not chunks:
        return []
    merged = []
    for level in range(len(chunks[0])):
        d = {}
        for k in chunks[0][level]:
            vals = [c[level][k] for c in chunks]
            if isinstance(vals[0], QTensor):
                d[k] = QTensor(np.concatenate([v.q for v in vals]), vals[0].p)
            else:
                d[k] = np.concatenate(vals)
        merged.append(d)
    return merged


class QuantizedDetector:
    """Integer-only inference graph converted from a calibrated :class:`Detector`."""

    def __init__(self, cfg: ModelConfig, p_oi, p_dem, backbone_oi: QBackbone, backbone_dem: QBackbone, awms: list[QAWM], heads: list[QHead]):
        self.cfg = cfg
        self.p_oi, self.p_dem = p_oi, p_dem
        self.backbone_oi, self.backbone_dem = backbone_oi, backbone_dem
        self.awms, self.heads = awms, heads

    @classmethod
    def from_float(cls, model: Detector) -> "QuantizedDetector":
        missing = model.uncalibrated()
        if missing:
            raise Q.CalibrationError(f"layer '{missing[0]}' is uncalibrated")
        p_oi, p_dem = model.in_obs_oi.params(), model.in_obs_dem.params()
        b_oi = model.backbone_oi.quantize(p_oi)
        b_dem = model.backbone_dem.quantize(p_dem)
        awms = []
        for awm, blocks_oi, blocks_dem in zip(model.awms, b_oi.stages, b_dem.stages):
            awms.append(awm.quantize(_out_params(blocks_oi[-1]), _out_params(blocks_dem[-1])))
        heads = [h.quantize(a.p_out) for h, a in zip(model.heads, awms)]
        return cls(model.cfg, p_oi, p_dem, b_oi, b_dem, awms, heads)

    def forward_int(self, q_oi: np.ndarray, q_dem: np.ndarray, traces: list | None = None) -> dict[str, QTensor]:
        f_oi = self.backbone_oi(QTensor(q_oi, self.p_oi))
        f_dem = self.backbone_dem(QTensor(q_dem, self.p_dem))
        out = {}
        for s, awm, head, a, b in zip(SCALES, self.awms, self.heads, f_oi.levels(), f_dem.levels()):
            tr = {} if traces is not None else None
            out[s] = head(awm(a, b, tr))
            if traces is not None:
                traces.append(tr)
        return out

    def quantize_inputs(self, oi: np.ndarray, dem: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return Q.quantize(oi, self.p_oi), Q.quantize(dem, self.p_dem)

    def predict(self, oi: np.ndarray, dem: np.ndarray, traces: list | None = None, batch: int = 64) -> dict[str, np.ndarray]:
        """Quantize normalised float inputs, run the integer graph, dequantize head outputs."""
        outs: dict[str, list] = {s: [] for s in SCALES}
        chunk_traces = []
        for start in range(0, len(oi), batch):
            q_oi, q_dem = self.quantize_inputs(oi[start : start + batch], dem[start : start + batch])
            tr = [] if traces is not None else None
            res = self.forward_int(q_oi, q_dem, tr)
            for s in SCALES:
                outs[s].append(Q.dequantize(res[s].q, res[s].p, dtype=np.float32))
            if tr is not None:
                chunk_traces.append(tr)
        if traces is not None:
            traces.extend(_merge_traces(chunk_traces))
        return {s: np.concatenate(v) for s, v in outs.items()}

    # ---- flat views for serialisation -----------------------------------------

    def named_convs(self) -> list[tuple[str, QConv]]:
        out = []
        for tag, bb in (("backbone_oi", self.backbone_oi), ("backbone_dem", self.backbone_dem)):
            for i, c in enumerate(bb.stem):
                out.append((f"{tag}.stem.{i}", c))
            for si, blocks in enumerate(bb.stages):
                for bi, b in enumerate(blocks):
                    for part in ("expand", "depthwise", "project"):
                        out.append((f"{tag}.stage{si + 3}.{bi}.{part}", getattr(b, part)))
        for s, awm in zip(SCALES, self.awms):
            for mod, convs in (("oi", awm.att_oi), ("dem", awm.att_dem)):
                out.append((f"fusion.{s}.att_{mod}.block", convs[0]))
                out.append((f"fusion.{s}.att_{mod}.gate", convs[1]))
        for s, h in zip(SCALES, self.heads):
            for part, c in zip(("conv1", "conv2", "out"), h.convs):
                out.append((f"head.{s}.{part}", c))
        return out

    def extra_qparams(self) -> dict:
        out = {"input_oi": self.p_oi, "input_dem": self.p_dem}
        for tag, bb in (("backbone_oi", self.backbone_oi), ("backbone_dem", self.backbone_dem)):
            for si, blocks in enumerate(bb.stages):
                for bi, b in enumerate(blocks):
                    if b.p_add is not None:
                        out[f"{tag}.stage{si + 3}.{bi}.add"] = b.p_add
        for s, awm in zip(SCALES, self.awms):
            out[f"fusion.{s}.mul_oi"] = awm.p_mul_oi
            out[f"fusion.{s}.mul_dem"] = awm.p_mul_dem
            out[f"fusion.{s}.fuse"] = awm.p_out
        return out

    def describe(self) -> dict:
        rows = Detector(self.cfg).describe()["layers"]
        for r in rows:
            r["fake_quant"] = False
            if "bn" in r:
                r["bn"] = False
        return {
            "config": self.cfg.to_dict(),
            "layers": rows,
            "outputs": {s: f"head.{s}.out" for s in SCALES},
            "qat": False,
            "fused": True,
            "quantized": True,
        }

    def weight_bytes(self) -> int:
        return sum(c.layer.weight.nbytes for _, c in self.named_convs())

    @classmethod
    def assemble(cls, cfg: ModelConfig, convs: dict[str, QConv], qp: dict[str, Q.QuantParams]) -> "QuantizedDetector":
        """Rebuild from per-layer pieces (inverse of :meth:`named_convs`/:meth:`extra_qparams`)."""
        from .backbone import QBottleneck

        def bb(tag):
            ref = Backbone(cfg.backbone, np.random.default_rng(0))
            stem = [convs[f"{tag}.stem.{i}"] for i in range(len(ref.stem))]
            stages = []
            for si, blocks in enumerate(ref.stages):
                qb = []
                for bi, _ in enumerate(blocks):
                    pre = f"{tag}.stage{si + 3}.{bi}"
                    qb.append(QBottleneck(convs[f"{pre}.expand"], convs[f"{pre}.depthwise"], convs[f"{pre}.project"], qp.get(f"{pre}.add")))
                stages.append(qb)
            return QBackbone(stem, stages)

        awms = []
        heads = []
        for s in SCALES:
            awms.append(
                QAWM(
                    [convs[f"fusion.{s}.att_oi.block"], convs[f"fusion.{s}.att_oi.gate"]],
                    [convs[f"fusion.{s}.att_dem.block"], convs[f"fusion.{s}.att_dem.gate"]],
                    qp[f"fusion.{s}.mul_oi"],
                    qp[f"fusion.{s}.mul_dem"],
                    qp[f"fusion.{s}.fuse"],
                    cfg.fusion,
                )
            )
            heads.append(QHead([convs[f"head.{s}.{p}"] for p in ("conv1", "conv2", "out")]))
        return cls(cfg, qp["input_oi"], qp["input_dem"], bb("backbone_oi"), bb("backbone_dem"), awms, heads)


def _out_params(block) -> Q.QuantParams:
    return block.p_add or block.project.layer.output
