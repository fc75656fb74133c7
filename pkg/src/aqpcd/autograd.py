"""Tape-based reverse-mode differentiation, optimisers and LR schedule.

Differentiable values are :class:`Var` objects wrapping numpy arrays.  While a
:class:`GradientTape` is active, every op whose inputs require gradients
appends a node to the tape; :func:`backward` walks that list in reverse,
which is a valid reverse topological order because nodes are appended as
they are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T


class DetachedGraphError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Var:
    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self):
        return vmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


@dataclass
class _Node:
    inputs: tuple
    output: Var
    backward: Callable


class GradientTape:
    """Records differentiable ops evaluated inside ``with tape:``."""

    _active: list["GradientTape"] = []

    def __init__(self, params: dict[str, Var] | None = None):
        self.nodes: list[_Node] = []
        self.params: dict[str, Var] = dict(params or {})

    def watch(self, params: dict[str, Var]) -> None:
        self.params.update(params)

    def __enter__(self):
        GradientTape._active.append(self)
        return self

    def __exit__(self, *exc):
        GradientTape._active.remove(self)
        return False

    @classmethod
    def current(cls) -> "GradientTape | None":
        return cls._active[-1] if cls._active else None


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _data(x):
    return x.data if isinstance(x, Var) else x


def _record(out: np.ndarray, inputs: tuple, bwd: Callable) -> Var:
    needs = any(isinstance(i, Var) and i.requires_grad for i in inputs)
    v = Var(out, requires_grad=needs)
    tape = GradientTape.current()
    if needs and tape is not None:
        tape.nodes.append(_Node(inputs, v, bwd))
    return v


def backward(tape: GradientTape, loss: Var, strict: bool = False) -> dict[str, np.ndarray]:
    """Back-propagate ``loss`` through ``tape``.

    Sets ``.grad`` on every watched parameter and returns ``{name: grad}``.
    With ``strict=True`` a watched parameter that the loss never reached
    raises :class:`DetachedGraphError`.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not (isinstance(inp, Var) and inp.requires_grad):
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        if g is None:
            if strict:
                raise DetachedGraphError(f"parameter '{name}' is not connected to the loss")
            g = np.zeros_like(p.data)
        p.grad = g
        out[name] = g
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape(x):
    return np.shape(_data(x))


# ---- elementwise -------------------------------------------------------------

def _needs(x) -> bool:
    return isinstance(x, Var) and x.requires_grad


def add(a, b) -> Var:
    sa, sb = _shape(a), _shape(b)
    return _record(
        _data(a) + _data(b),
        (a, b),
        lambda g: (_unbroadcast(g, sa) if _needs(a) else None, _unbroadcast(g, sb) if _needs(b) else None),
    )


def sub(a, b) -> Var:
    sa, sb = _shape(a), _shape(b)
    return _record(
        _data(a) - _data(b),
        (a, b),
        lambda g: (_unbroadcast(g, sa) if _needs(a) else None, _unbroadcast(-g, sb) if _needs(b) else None),
    )


def mul(a, b) -> Var:
    da, db = _data(a), _data(b)
    return _record(
        da * db,
        (a, b),
        lambda g: (
            _unbroadcast(g * db, np.shape(da)) if _needs(a) else None,
            _unbroadcast(g * da, np.shape(db)) if _needs(b) else None,
        ),
    )


def div(a, b) -> Var:
    da, db = _data(a), _data(b)
    out = da / db
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / db, np.shape(da)) if _needs(a) else None,
            _unbroadcast(-g * out / db, np.shape(db)) if _needs(b) else None,
        ),
    )


def neg(a) -> Var:
    return _record(-_data(a), (a,), lambda g: (-g,))


def square(a) -> Var:
    d = _data(a)
    return _record(d * d, (a,), lambda g: (2 * d * g,))


def exp(a) -> Var:
    out = np.exp(_data(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    d = _data(a)
    return _record(np.log(d), (a,), lambda g: (g / d,))


def sqrt(a) -> Var:
    out = np.sqrt(_data(a))
    return _record(out, (a,), lambda g: (g / (2 * out),))


def atan(a) -> Var:
    d = _data(a)
    return _record(np.arctan(d), (a,), lambda g: (g / (1 + d * d),))


def sigmoid(a) -> Var:
    out = T.sigmoid(_data(a))
    return _record(out, (a,), lambda g: (g * out * (1 - out),))


def silu(a) -> Var:
    d = _data(a)
    s = T.sigmoid(d)
    return _record(d * s, (a,), lambda g: (g * s * (1 + d * (1 - s)),))


def maximum(a, b) -> Var:
    da, db = _data(a), _data(b)
    pick_a = da >= db
    return _record(
        np.maximum(da, db),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, np.shape(da)), _unbroadcast(g * ~pick_a, np.shape(db))),
    )


def minimum(a, b) -> Var:
    da, db = _data(a), _data(b)
    pick_a = da <= db
    return _record(
        np.minimum(da, db),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, np.shape(da)), _unbroadcast(g * ~pick_a, np.shape(db))),
    )


def clamp(a, lo=None, hi=None) -> Var:
    d = _data(a)
    out = np.clip(d, lo, hi)
    inside = out == d
    return _record(out, (a,), lambda g: (g * inside,))


def bce_with_logits(logit, target) -> Var:
    """Elementwise binary cross-entropy on logits, overflow-free."""
    x, t = _data(logit), _data(target)
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _record(out, (logit,), lambda g: (g * (T.sigmoid(x) - t),))


# ---- reductions and shape ----------------------------------------------------

def vsum(a, axis=None) -> Var:
    d = _data(a)
    shp = d.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shp).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shp).copy(),)

    return _record(np.asarray(d.sum(axis=axis)), (a,), bwd)


def vmean(a) -> Var:
    d = _data(a)
    n = max(d.size, 1)
    return _record(np.asarray(d.mean() if d.size else d.sum()), (a,), lambda g: (np.full(d.shape, g / n, dtype=d.dtype),))


def reshape(a, shape) -> Var:
    d = _data(a)
    return _record(d.reshape(shape), (a,), lambda g: (g.reshape(d.shape),))


def getitem(a, idx) -> Var:
    d = _data(a)

    def bwd(g):
        out = np.zeros_like(d)
        np.add.at(out, idx, g)
        return (out,)

    return _record(d[idx], (a,), bwd)


def concat(items: Sequence, axis: int = 1) -> Var:
    datas = [_data(i) for i in items]
    bounds = np.cumsum([0] + [x.shape[axis] for x in datas])

    def bwd(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(datas)))

    return _record(np.concatenate(datas, axis=axis), tuple(items), bwd)


def concat_channels(a, b) -> Var:
    T.concat_channels(_data(a)[:, :0], _data(b)[:, :0])  # shape validation only
    return concat([a, b], axis=1)


def elementwise_mul(a, b) -> Var:
    if _shape(a) != _shape(b):
        raise T.ShapeError("elementwise_mul", "shape", _shape(a), _shape(b))
    return mul(a, b)


def elementwise_add(a, b) -> Var:
    if _shape(a) != _shape(b):
        raise T.ShapeError("elementwise_add", "shape", _shape(a), _shape(b))
    return add(a, b)


# ---- layers ------------------------------------------------------------------

def conv2d(x, weight, bias, spec: T.ConvSpec) -> Var:
    dx, dw = _data(x), _data(weight)
    out = T.conv2d(dx, dw, _data(bias) if bias is not None else None, spec)
    need_x = isinstance(x, Var) and x.requires_grad

    def bwd(g):
        gx, gw = T.conv2d_backward(dx, dw, spec, g, need_x=need_x)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, eps=T.BN_EPS, training=False, momentum=T.BN_MOMENTUM):
    """Differentiable BN. Returns ``(y, new_mean, new_var)``; stats are unchanged in eval mode."""
    dx, dg, db = _data(x), _data(gamma), _data(beta)
    c = dx.shape[1]
    shp = (1, c, 1, 1)
    if not training:
        y = T.batch_norm(dx, dg, db, running_mean, running_var, eps)
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (dx - running_mean.reshape(shp)) * inv.reshape(shp)

        def bwd_eval(g):
            return (
                g * (dg * inv).reshape(shp),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _record(y, (x, gamma, beta), bwd_eval), running_mean, running_var
    y, nm, nv = T.batch_norm(dx, dg, db, running_mean, running_var, eps, training=True, momentum=momentum)
    mean = dx.mean(axis=(0, 2, 3))
    var = dx.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (dx - mean.reshape(shp)) * inv.reshape(shp)
    m = dx.size // c

    def bwd(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = (dg * inv).reshape(shp) / m * (m * g - gb.reshape(shp) - xhat * gg.reshape(shp))
        return gx, gg, gb

    return _record(y, (x, gamma, beta), bwd), nm, nv


class _SteSurrogate:
    enabled = False


class ste_surrogate:
    """Context manager: fake-quant nodes evaluate their straight-through
    surrogate ``clip(x, lo, hi)`` in the forward pass, where ``[lo, hi)`` is
    the interval that rounds to unsaturated codes.

    The backward rule is unchanged, so finite differences taken under this
    context check the STE gradient implementation exactly.
    """

    def __enter__(self):
        self._prev = _SteSurrogate.enabled
        _SteSurrogate.enabled = True
        return self

    def __exit__(self, *exc):
        _SteSurrogate.enabled = self._prev
        return False


def fake_quant(x, scale, zero_point, qmin: int = -128, qmax: int = 127) -> Var:
    """Quantize-dequantize with a straight-through gradient.

    ``scale``/``zero_point`` broadcast against ``x`` (per-tensor scalars or
    per-channel arrays shaped for broadcasting).
    """
    from .quant import round_half_away

    d = _data(x)
    # gradient passes wherever rounding lands on an unsaturated code
    lo = (qmin - 0.5 - zero_point) * scale
    hi = (qmax + 0.5 - zero_point) * scale
    inside = (d >= lo) & (d < hi)
    if _SteSurrogate.enabled:
        out = np.clip(d, lo, hi).astype(d.dtype)
    else:
        q = np.clip(round_half_away(d / scale) + zero_point, qmin, qmax)
        out = ((q - zero_point) * scale).astype(d.dtype)
    return _record(out, (x,), lambda g: (g * inside,))


# ---- gradient check ----------------------------------------------------------

def gradcheck(
    fn: Callable[[], Var],
    params: dict[str, Var],
    h: float = 1e-3,
    samples: int | None = 6,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare tape gradients of ``fn()`` against central differences.

    Returns the worst relative error per parameter. ``samples`` coordinates
    are probed per parameter (all of them when ``None``). Run in float64.
    """
    rng = rng or np.random.default_rng(0)
    with GradientTape(params) as tape:
        loss = fn()
    grads = backward(tape, loss)
    worst = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = range(flat.size) if samples is None or samples >= flat.size else rng.choice(flat.size, samples, replace=False)
        err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-6)
            err = max(err, abs(num - ana) / denom)
        worst[name] = err
    return worst


# ---- optimisation ------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    state: OptimizerState,
    params: dict[str, Var],
    grads: dict[str, np.ndarray],
    lr: float,
    no_decay: Iterable[str] = (),
) -> None:
    """One AdamW update with bias correction; decay is decoupled from the gradient.

    Parameters listed in ``no_decay`` skip weight decay. Arrays are replaced,
    not written in place.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for '{name}'")
    skip = set(no_decay)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if p.data.shape != g.shape:
            raise T.ShapeError("adamw_step", name, p.data.shape, g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data
        if state.weight_decay and name not in skip:
            new = new * (1 - lr * state.weight_decay)
        p.data = (new - upd).astype(p.data.dtype)


def adam_step(state: OptimizerState, params, grads, lr) -> None:
    """Plain Adam: AdamW with zero weight decay."""
    state.weight_decay = 0.0
    adamw_step(state, params, grads, lr)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * s).astype(grads[k].dtype)
    return total


@dataclass(frozen=True)
class LrSchedule:
    lr0: float
    gamma: float = 0.1
    decay_steps: int = 100
    staircase: bool = False

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be positive")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Exponential decay ``lr0 * gamma ** (epoch / d)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    e = epoch // schedule.decay_steps if schedule.staircase else epoch / schedule.decay_steps
    return schedule.lr0 * schedule.gamma**e


def early_stop(history: Sequence[float], patience: int, mode: str = "max") -> bool:
    """True once the best value is ``patience`` evaluations old (strict improvement)."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        return False
    h = np.asarray(history, dtype=np.float64)
    best = int(np.argmax(h) if mode == "max" else np.argmin(h))
    return len(h) - 1 - best >= patience
