"""Module base class and the ConvBnAct layer, float and integer forms."""

from __future__ import annotations

from typing import Iterator, NamedTuple

import numpy as np

from . import autograd as ag
from . import quant as Q
from . import tensor as T
from .autograd import Var

ACTS = {
    "silu": (ag.silu, T.silu),
    "sigmoid": (ag.sigmoid, T.sigmoid),
}


class QTensor(NamedTuple):
    q: np.ndarray  # int8
    p: Q.QuantParams


class Module:
    """Minimal container: parameters (Var), buffers (ndarray), observers, children."""

    def __init__(self):
        self.training = False
        self.qat = False
        self.calibrating = False

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m

    def local_params(self) -> dict[str, Var]:
        return {}

    def local_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def local_observers(self) -> dict[str, Q.MinMaxObserver]:
        return {}

    def _walk(self, attr: str, prefix: str = "") -> dict:
        out = {f"{prefix}{k}": v for k, v in getattr(self, attr)().items()}
        for name, child in self.children():
            out.update(child._walk(attr, f"{prefix}{name}."))
        return out

    def params(self) -> dict[str, Var]:
        return self._walk("local_params")

    def buffers(self) -> dict[str, np.ndarray]:
        return self._walk("local_buffers")

    def observers(self) -> dict[str, Q.MinMaxObserver]:
        return self._walk("local_observers")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, c in self.children():
            yield from c.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_qat(self, on: bool = True) -> "Module":
        for m in self.modules():
            m.qat = on
        return self

    def set_calibrating(self, on: bool = True) -> "Module":
        for m in self.modules():
            m.calibrating = on
        return self

    def observe(self, v: Var, obs: Q.MinMaxObserver) -> Var:
        """Update ``obs`` when collecting statistics; fake-quantize under QAT."""
        if self.calibrating or (self.qat and self.training):
            obs.update(v.data)
        if self.qat:
            p = obs.params()
            return ag.fake_quant(v, np.float32(p.scale), int(p.zero_point))
        return v

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params().values())


def kaiming_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ConvBnAct(Module):
    """Conv2D -> optional BatchNorm -> optional activation (silu or sigmoid).

    ``bn=False`` layers carry a bias instead. :meth:`fuse` folds BN into
    the conv so the layer becomes conv+bias, which is what QAT trains and
    what converts to a :class:`~aqpcd.quant.QuantizedLayer`.
    """

    def __init__(self, spec: T.ConvSpec, rng: np.random.Generator, bn: bool = True, act: str = "silu", eps: float = T.BN_EPS, momentum: float = T.BN_MOMENTUM):
        super().__init__()
        if act not in ("none", *ACTS):
            raise ValueError(f"unknown activation {act!r}")
        self.spec = spec
        self.act = act
        self.bn = bn
        self.eps = eps
        self.momentum = momentum
        c = spec.out_channels
        self.weight = Var(kaiming_uniform(rng, spec.weight_shape), requires_grad=True)
        self.bias = None if bn else Var(np.zeros(c, np.float32), requires_grad=True)
        if bn:
            self.gamma = Var(np.ones(c, np.float32), requires_grad=True)
            self.beta = Var(np.zeros(c, np.float32), requires_grad=True)
            self.running_mean = np.zeros(c, np.float32)
            self.running_var = np.ones(c, np.float32)
        self.pre_obs = Q.MinMaxObserver()
        self.out_obs = Q.MinMaxObserver()

    def local_params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        if self.bn:
            out["gamma"] = self.gamma
            out["beta"] = self.beta
        return out

    def local_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var} if self.bn else {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)

    def local_observers(self):
        out = {"out_obs": self.out_obs}
        if self.act != "none":
            out["pre_obs"] = self.pre_obs
        return out

    def weight_fq(self) -> Var:
        w = self.weight
        if not self.qat:
            return w
        wp = Q.symmetric_weight_params(w.data)
        s = np.asarray(wp.scale, np.float32).reshape(-1, 1, 1, 1)
        return ag.fake_quant(w, s, 0, -Q.WMAX, Q.WMAX)

    def forward(self, x: Var) -> Var:
        z = ag.conv2d(x, self.weight_fq(), self.bias, self.spec)
        if self.bn:
            z, nm, nv = ag.batch_norm(z, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, self.training, self.momentum)
            if self.training:
                self.running_mean, self.running_var = nm, nv
        if self.act != "none":
            z = self.observe(z, self.pre_obs)
            z = ACTS[self.act][0](z)
        return self.observe(z, self.out_obs)

    __call__ = forward

    def fuse(self) -> None:
        if not self.bn:
            return
        w, b = Q.fuse_conv_bn(self.weight.data, None, self.gamma.data, self.beta.data, self.running_mean, self.running_var, self.eps)
        self.weight = Var(w, requires_grad=True)
        self.bias = Var(b, requires_grad=True)
        self.bn = False
        del self.gamma, self.beta, self.running_mean, self.running_var

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Float weight/bias with BN folded in (without mutating the layer)."""
        if self.bn:
            return Q.fuse_conv_bn(self.weight.data, None, self.gamma.data, self.beta.data, self.running_mean, self.running_var, self.eps)
        return self.weight.data, self.bias.data

    def quantize(self, p_in: Q.QuantParams) -> "QConv":
        w, b = self.folded()
        pre = self.pre_obs.params() if self.act != "none" else None
        fn = ACTS[self.act][1] if self.act != "none" else None
        layer = Q.quantize_conv(w, b, self.spec, p_in, self.out_obs.params(), self.act, pre, fn)
        return QConv(layer)

    def describe(self, name: str, inp: str) -> list[dict]:
        s = self.spec
        return [
            {
                "name": name,
                "kind": "dwconv" if s.depthwise else ("pwconv" if s.kernel == 1 else "conv"),
                "inputs": [inp],
                "output": name,
                "k": s.kernel,
                "cin": s.in_channels,
                "cout": s.out_channels,
                "stride": s.stride,
                "padding": s.padding,
                "groups": s.groups,
                "bn": self.bn,
                "act": self.act,
                "fake_quant": self.qat,
            }
        ]


class QConv:
    """Integer counterpart of :class:`ConvBnAct`."""

    def __init__(self, layer: Q.QuantizedLayer):
        self.layer = layer

    def __call__(self, x: QTensor) -> QTensor:
        if x.p != self.layer.input:
            raise ValueError("input quantization params do not match the layer's calibration")
        return QTensor(Q.int8_conv2d(x.q, self.layer), self.layer.output)

    def tensors(self) -> dict[str, np.ndarray]:
        L = self.layer
        out = {
            "weight": L.weight,
            "bias": L.bias,
            "m0": L.m0.astype(np.int32),
            "shift": L.shift.astype(np.int8),
            "weight_scale": np.asarray(L.weight_params.scale, np.float64),
        }
        if L.lut is not None:
            out["lut"] = L.lut
        return out

    def qparams(self) -> dict:
        L = self.layer
        out = {"input": _pj(L.input), "output": _pj(L.output)}
        if L.pre is not None:
            out["pre"] = _pj(L.pre)
        return out

    @classmethod
    def from_tensors(cls, spec: T.ConvSpec, act: str, tensors: dict, qp: dict) -> "QConv":
        wp = Q.QuantParams(tensors["weight_scale"].astype(np.float64), np.zeros(spec.out_channels, np.int64), per_channel=True)
        layer = Q.QuantizedLayer(
            spec,
            tensors["weight"],
            tensors["bias"],
            _pl(qp["input"]),
            wp,
            _pl(qp["output"]),
            tensors["m0"].astype(np.int64),
            tensors["shift"].astype(np.int64),
            act,
            _pl(qp["pre"]) if "pre" in qp else None,
            tensors.get("lut"),
        )
        return cls(layer)


def _pj(p: Q.QuantParams) -> list:
    return [float(p.scale), int(p.zero_point)]


def _pl(v) -> Q.QuantParams:
    return Q.QuantParams(float(v[0]), int(v[1]))
