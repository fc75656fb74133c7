"""Quantization-aware backbone: stride-2 ConvBnAct stem plus stacked bottlenecks.

Emits a three-level feature pyramid at strides 4, 8 and 16. Two instances
(optical and DEM) share one :class:`BackboneConfig` but not weights.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from . import quant as Q
from .autograd import Var
from .layers import ConvBnAct, Module, QConv, QTensor
from .tensor import ConvSpec, ShapeError

STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    expansion: int = 2
    kernel: int = 3
    residual: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["blocks_per_stage"] = tuple(d["blocks_per_stage"])
        return cls(**d)


@dataclass
class FeaturePyramid:
    p3: object
    p4: object
    p5: object

    def levels(self) -> tuple:
        return (self.p3, self.p4, self.p5)


class Bottleneck(Module):
    """1x1 expand -> BN -> SiLU -> 3x3 depthwise -> BN -> SiLU -> 1x1 project -> BN.

    An identity skip is added when input and output shapes match.
    """

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, expansion: int = 2, kernel: int = 3, residual: bool = True):
        super().__init__()
        hidden = cin * expansion
        self.expand = ConvBnAct(ConvSpec(1, cin, hidden), rng)
        self.depthwise = ConvBnAct(ConvSpec(kernel, hidden, hidden, stride, kernel // 2, groups=hidden), rng)
        self.project = ConvBnAct(ConvSpec(1, hidden, cout), rng, act="none")
        self.use_skip = residual and stride == 1 and cin == cout
        self.add_obs = Q.MinMaxObserver()

    def local_observers(self):
        return {"add_obs": self.add_obs} if self.use_skip else {}

    def forward(self, x: Var) -> Var:
        y = self.project(self.depthwise(self.expand(x)))
        if self.use_skip:
            y = self.observe(ag.add(x, y), self.add_obs)
        return y

    __call__ = forward

    def convs(self) -> list[ConvBnAct]:
        return [self.expand, self.depthwise, self.project]

    def quantize(self, p_in: Q.QuantParams) -> "QBottleneck":
        qe = self.expand.quantize(p_in)
        qd = self.depthwise.quantize(qe.layer.output)
        qp = self.project.quantize(qd.layer.output)
        p_add = self.add_obs.params() if self.use_skip else None
        return QBottleneck(qe, qd, qp, p_add)

    def describe(self, name: str, inp: str) -> list[dict]:
        rows = self.expand.describe(f"{name}.expand", inp)
        rows += self.depthwise.describe(f"{name}.depthwise", rows[-1]["output"])
        rows += self.project.describe(f"{name}.project", rows[-1]["output"])
        if self.use_skip:
            rows.append({"name": f"{name}.add", "kind": "add", "inputs": [inp, rows[-1]["output"]], "output": f"{name}.add", "fake_quant": self.qat})
        return rows


class QBottleneck:
    def __init__(self, expand: QConv, depthwise: QConv, project: QConv, p_add: Q.QuantParams | None):
        self.expand, self.depthwise, self.project = expand, depthwise, project
        self.p_add = p_add

    def __call__(self, x: QTensor) -> QTensor:
        y = self.project(self.depthwise(self.expand(x)))
        if self.p_add is None:
            return y
        return QTensor(Q.int8_add(x.q, x.p, y.q, y.p, self.p_add), self.p_add)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        k, pad = cfg.kernel, cfg.kernel // 2
        self.stem = [
            ConvBnAct(ConvSpec(k, 1, cfg.stem_channels, 2, pad), rng),
            ConvBnAct(ConvSpec(k, cfg.stem_channels, cfg.stem_channels, 2, pad), rng),
        ]
        self.stages: list[list[Bottleneck]] = []
        cin = cfg.stem_channels
        for si, (cout, n) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for bi in range(n):
                stride = 2 if (si > 0 and bi == 0) else 1
                blocks.append(Bottleneck(cin, cout, stride, rng, cfg.expansion, k, cfg.residual))
                cin = cout
            self.stages.append(blocks)
        self.stage3, self.stage4, self.stage5 = self.stages

    def children(self):
        for i, m in enumerate(self.stem):
            yield f"stem.{i}", m
        for si, blocks in enumerate(self.stages):
            for bi, b in enumerate(blocks):
                yield f"stage{si + 3}.{bi}", b

    def forward(self, x: Var) -> FeaturePyramid:
        h, w = x.shape[2:]
        if x.shape[1] != 1:
            raise ShapeError("backbone", "C", 1, x.shape[1])
        if h % 16 or w % 16:
            raise ShapeError("backbone", "H/W", "multiples of 16 (pad the raster)", (h, w))
        for m in self.stem:
            x = m(x)
        outs = []
        for blocks in self.stages:
            for b in blocks:
                x = b(x)
            outs.append(x)
        return FeaturePyramid(*outs)

    __call__ = forward

    def convs(self) -> list[ConvBnAct]:
        out = list(self.stem)
        for blocks in self.stages:
            for b in blocks:
                out += b.convs()
        return out

    def quantize(self, p_in: Q.QuantParams) -> "QBackbone":
        stem = []
        p = p_in
        for m in self.stem:
            stem.append(m.quantize(p))
            p = stem[-1].layer.output
        stages = []
        for blocks in self.stages:
            qb = []
            for b in blocks:
                qb.append(b.quantize(p))
                p = qb[-1].p_add or qb[-1].project.layer.output
            stages.append(qb)
        return QBackbone(stem, stages)

    def describe(self, name: str, inp: str) -> tuple[list[dict], list[str]]:
        rows = []
        cur = inp
        for i, m in enumerate(self.stem):
            rows += m.describe(f"{name}.stem.{i}", cur)
            cur = rows[-1]["output"]
        outs = []
        for si, blocks in enumerate(self.stages):
            for bi, b in enumerate(blocks):
                rows += b.describe(f"{name}.stage{si + 3}.{bi}", cur)
                cur = rows[-1]["output"]
            outs.append(cur)
        return rows, outs


class QBackbone:
    def __init__(self, stem: list[QConv], stages: list[list[QBottleneck]]):
        self.stem, self.stages = stem, stages

    def __call__(self, x: QTensor) -> FeaturePyramid:
        for m in self.stem:
            x = m(x)
        outs = []
        for blocks in self.stages:
            for b in blocks:
                x = b(x)
            outs.append(x)
        return FeaturePyramid(*outs)


def conv_bn_act_forward(x, block: ConvBnAct):
    return block(x if isinstance(x, Var) else Var(x))


def bottleneck_forward(x, block: Bottleneck):
    return block(x if isinstance(x, Var) else Var(x))


def backbone_forward(x, backbone: Backbone) -> FeaturePyramid:
    return backbone(x if isinstance(x, Var) else Var(x))
