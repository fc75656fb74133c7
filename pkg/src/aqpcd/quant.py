"""Affine int8 quantization, observers, conv-BN folding and integer kernels.

Real values map to signed 8-bit codes through ``r ~= S * (q - Z)``.
Activations are per-tensor affine; conv weights are per-output-channel
symmetric (``Z_w = 0``). Rounding is half-away-from-zero wherever a real
value becomes an integer code. The integer kernels below run entirely in
int32/int64 arithmetic; :data:`COUNTERS` records how many float operands
reached them, which should always stay at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ConvSpec, ShapeError, _pad, im2col

QMIN, QMAX = -128, 127
WMAX = 127  # symmetric weight range [-127, 127]
DEGENERATE_SCALE = 1e-8


class CalibrationError(ValueError):
    pass


class AccumulatorOverflowError(OverflowError):
    pass


def round_half_away(x):
    """Round to nearest integer, ties away from zero (returns float)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float | np.ndarray
    zero_point: int | np.ndarray = 0
    per_channel: bool = False

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        if not np.all(s > 0):
            raise ValueError(f"quantization scale must be > 0, got {self.scale}")
        z = np.asarray(self.zero_point)
        if np.any(z < QMIN) or np.any(z > QMAX):
            raise ValueError(f"zero point {self.zero_point} outside int8 range")

    def broadcast(self, ndim: int, axis: int = 0):
        """Scale and zero-point shaped to broadcast along ``axis`` of an ``ndim`` array."""
        if not self.per_channel:
            return float(self.scale), int(self.zero_point)
        shp = [1] * ndim
        shp[axis] = -1
        return (np.asarray(self.scale, np.float64).reshape(shp), np.asarray(self.zero_point, np.int64).reshape(shp))

    @property
    def lo(self) -> float:
        return float(np.min(np.asarray(self.scale) * (QMIN - np.asarray(self.zero_point))))

    @property
    def hi(self) -> float:
        return float(np.max(np.asarray(self.scale) * (QMAX - np.asarray(self.zero_point))))


def quantize(r, p: QuantParams, axis: int = 0):
    """``clamp(round(r / S) + Z, -128, 127)`` as int8 (a Python int for scalar input)."""
    arr = np.asarray(r, dtype=np.float64)
    s, z = p.broadcast(arr.ndim, axis) if p.per_channel else (float(p.scale), int(p.zero_point))
    q = np.clip(round_half_away(arr / s) + z, QMIN, QMAX).astype(np.int8)
    return int(q) if q.ndim == 0 else q


def dequantize(q, p: QuantParams, axis: int = 0, dtype=np.float64):
    """``S * (q - Z)``."""
    arr = np.asarray(q, dtype=np.int64)
    s, z = p.broadcast(arr.ndim, axis) if p.per_channel else (float(p.scale), int(p.zero_point))
    r = (s * (arr - z)).astype(dtype)
    return float(r) if r.ndim == 0 else r


def params_from_range(lo: float, hi: float) -> QuantParams:
    """Affine params for ``[lo, hi]`` widened to contain 0 (so real zero is exact)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        return QuantParams(DEGENERATE_SCALE, 0)
    s = (hi - lo) / (QMAX - QMIN)
    z = int(np.clip(QMIN - round_half_away(lo / s), QMIN, QMAX))
    return QuantParams(s, z)


def calibrate_minmax(samples) -> QuantParams:
    """Min-max calibration over an array or an iterable of arrays."""
    if isinstance(samples, np.ndarray):
        samples = [samples]
    lo, hi = np.inf, -np.inf
    for s in samples:
        a = np.asarray(s, dtype=np.float64)
        a = a[np.isfinite(a)]
        if a.size:
            lo, hi = min(lo, a.min()), max(hi, a.max())
    if not np.isfinite(lo):
        raise CalibrationError("no finite samples to calibrate from")
    return params_from_range(lo, hi)


def symmetric_weight_params(w: np.ndarray, floor: np.ndarray | float = 0.0) -> QuantParams:
    """Per-output-channel symmetric params for a conv weight ``(C_out, ...)``."""
    amax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1).astype(np.float64) if w.size else np.zeros(w.shape[0])
    s = np.maximum(amax / WMAX, floor)
    s = np.where(s > 0, s, 1.0)
    return QuantParams(s, np.zeros(w.shape[0], np.int64), per_channel=True)


def quantize_weight(w: np.ndarray, p: QuantParams) -> np.ndarray:
    s, _ = p.broadcast(w.ndim, 0)
    return np.clip(round_half_away(w / s), -WMAX, WMAX).astype(np.int8)


@dataclass
class MinMaxObserver:
    """Running min/max over everything it has seen (no averaging)."""

    lo: float = np.inf
    hi: float = -np.inf

    def update(self, x: np.ndarray) -> None:
        if x.size:
            self.lo = min(self.lo, float(x.min()))
            self.hi = max(self.hi, float(x.max()))

    @property
    def calibrated(self) -> bool:
        return np.isfinite(self.lo) and np.isfinite(self.hi)

    def params(self) -> QuantParams:
        if not self.calibrated:
            raise CalibrationError("observer has not seen any data")
        return params_from_range(self.lo, self.hi)


def fuse_conv_bn(weight, bias, gamma, beta, mean, var, eps=1e-5):
    """Fold inference-mode BN into the preceding conv; returns ``(weight, bias)``."""
    denom = np.asarray(var, np.float64) + eps
    if np.any(denom <= 0):
        raise ValueError("fuse_conv_bn: var + eps must be > 0")
    k = np.asarray(gamma, np.float64) / np.sqrt(denom)
    b = np.zeros_like(mean, dtype=np.float64) if bias is None else np.asarray(bias, np.float64)
    w = np.asarray(weight, np.float64) * k.reshape(-1, 1, 1, 1)
    b = (b - mean) * k + beta
    return w.astype(weight.dtype), b.astype(weight.dtype)


# ---- fixed-point requantization ----------------------------------------------

def quantize_multiplier(m) -> tuple[np.ndarray, np.ndarray]:
    """Split positive real multipliers into int32 mantissa and right shift.

    ``m ~= m0 / 2**shift`` with ``2**30 <= m0 < 2**31`` for nonzero ``m``.
    """
    m = np.atleast_1d(np.asarray(m, np.float64))
    m0 = np.zeros(m.shape, np.int64)
    shift = np.zeros(m.shape, np.int64)
    for i, v in enumerate(m):
        if v == 0:
            shift[i] = 1
            continue
        frac, e = np.frexp(v)  # v = frac * 2**e, frac in [0.5, 1)
        q = int(round_half_away(frac * (1 << 31)))
        if q == 1 << 31:
            q //= 2
            e += 1
        sh = 31 - int(e)
        if not 1 <= sh <= 62:
            raise OverflowError(f"requantization multiplier {v} out of fixed-point range")
        m0[i], shift[i] = q, sh
    return m0, shift


def rshift_round(v: np.ndarray, shift) -> np.ndarray:
    """Arithmetic right shift with round-half-up."""
    shift = np.asarray(shift, np.int64)
    return (v + (np.int64(1) << (shift - 1))) >> shift


def requantize(acc: np.ndarray, m0, shift, axis: int | None = None) -> np.ndarray:
    """``round(acc * m0 / 2**shift)`` in int64; per-channel along ``axis``."""
    acc = np.asarray(acc, np.int64)
    _guard(acc)
    m0 = np.asarray(m0, np.int64)
    shift = np.asarray(shift, np.int64)
    if axis is not None and m0.ndim:
        shp = [1] * acc.ndim
        shp[axis] = -1
        m0, shift = m0.reshape(shp), shift.reshape(shp)
    elif m0.ndim:
        m0, shift = m0.reshape(()), shift.reshape(())
    return rshift_round(acc * m0, shift)


# ---- integer kernels ---------------------------------------------------------

@dataclass
class KernelCounters:
    calls: int = 0
    int_macs: int = 0
    float_ops: int = 0

    def reset(self):
        self.calls = self.int_macs = self.float_ops = 0


COUNTERS = KernelCounters()


def _guard(*arrays) -> None:
    for a in arrays:
        if np.asarray(a).dtype.kind not in "iub":
            COUNTERS.float_ops += int(np.asarray(a).size)


@dataclass
class QuantizedLayer:
    """Integer conv layer with fused bias, requantization and optional LUT activation."""

    spec: ConvSpec
    weight: np.ndarray  # int8
    bias: np.ndarray  # int32, scale S_x * S_w[c]
    input: QuantParams
    weight_params: QuantParams
    output: QuantParams
    m0: np.ndarray
    shift: np.ndarray
    act: str = "none"
    pre: QuantParams | None = None
    lut: np.ndarray | None = None

    @property
    def bias_scale(self) -> np.ndarray:
        return float(self.input.scale) * np.asarray(self.weight_params.scale, np.float64)


def build_lut(fn: Callable[[np.ndarray], np.ndarray], p_in: QuantParams, p_out: QuantParams) -> np.ndarray:
    """256-entry int8 table ``q_in -> quantize(fn(dequantize(q_in)))`` indexed by ``q_in + 128``."""
    codes = np.arange(QMIN, QMAX + 1, dtype=np.int64)
    return quantize(fn(dequantize(codes, p_in)), p_out).astype(np.int8)


def quantize_conv(
    weight: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
    p_in: QuantParams,
    p_out: QuantParams,
    act: str = "none",
    p_pre: QuantParams | None = None,
    act_fn: Callable | None = None,
) -> QuantizedLayer:
    """Build a :class:`QuantizedLayer` from float (already BN-folded) conv params.

    With an activation, the conv result is requantized to ``p_pre`` and a
    LUT maps it to ``p_out``.
    """
    s_x = float(p_in.scale)
    b = np.zeros(spec.out_channels) if bias is None else np.asarray(bias, np.float64)
    # keep the int32 bias representable even for all-zero weight channels
    wp = symmetric_weight_params(np.asarray(weight, np.float64), floor=np.abs(b) / (s_x * 2.0**30))
    qw = quantize_weight(np.asarray(weight, np.float64), wp)
    bias_scale = s_x * np.asarray(wp.scale)
    qb = round_half_away(b / bias_scale).astype(np.int64)
    target = p_pre if act != "none" else p_out
    m0, shift = quantize_multiplier(bias_scale / float(target.scale))
    lut = None
    if act != "none":
        if p_pre is None or act_fn is None:
            raise ValueError("activation layers need pre-activation params and act_fn")
        lut = build_lut(act_fn, p_pre, p_out)
    return QuantizedLayer(spec, qw, qb.astype(np.int32), p_in, wp, p_out, m0, shift, act, p_pre if act != "none" else None, lut)


def _check_accumulator(layer: QuantizedLayer) -> None:
    k = layer.spec.kernel
    taps = k * k * (1 if layer.spec.depthwise else layer.spec.in_channels)
    bound = taps * 255 * WMAX + int(np.max(np.abs(layer.bias.astype(np.int64)), initial=0))
    if bound >= 2**31:
        raise AccumulatorOverflowError(f"int32 accumulator may overflow: bound {bound} for {layer.spec}")


def int8_conv2d(q_input: np.ndarray, layer: QuantizedLayer, spec: ConvSpec | None = None) -> np.ndarray:
    """Integer-only convolution: int32 accumulate, fixed-point requantize, LUT."""
    spec = spec or layer.spec
    if q_input.dtype != np.int8:
        raise TypeError(f"int8_conv2d expects int8 input, got {q_input.dtype}")
    if q_input.ndim != 4 or q_input.shape[1] != spec.in_channels:
        raise ShapeError("int8_conv2d", "C_in", spec.in_channels, q_input.shape[1] if q_input.ndim == 4 else q_input.shape)
    if tuple(layer.weight.shape) != spec.weight_shape:
        raise ShapeError("int8_conv2d", "weight", spec.weight_shape, layer.weight.shape)
    _check_accumulator(layer)
    COUNTERS.calls += 1
    n, c, h, w = q_input.shape
    ho, wo = spec.output_hw(h, w)
    k, s = spec.kernel, spec.stride
    zx = np.int32(int(layer.input.zero_point))
    x = q_input.astype(np.int32) - zx
    _guard(x, layer.weight, layer.bias)
    # zero-padding the centred codes == padding the raw codes with Z_x
    xp = _pad(x, spec.padding)
    wq = layer.weight.astype(np.int32)
    if spec.depthwise:
        acc = np.zeros((n, c, ho, wo), np.int32)
        for i in range(k):
            for j in range(k):
                acc += xp[:, :, i : i + s * ho : s, j : j + s * wo : s] * wq[:, 0, i, j].reshape(1, c, 1, 1)
        COUNTERS.int_macs += k * k * n * c * ho * wo
    else:
        cols = im2col(xp, k, s, ho, wo)
        acc = np.matmul(wq.reshape(spec.out_channels, -1), cols).reshape(n, spec.out_channels, ho, wo)
        COUNTERS.int_macs += k * k * spec.in_channels * spec.out_channels * n * ho * wo
    acc = acc + layer.bias.reshape(1, -1, 1, 1)
    _guard(acc)
    target = layer.pre if layer.act != "none" else layer.output
    q = requantize(acc, layer.m0, layer.shift, axis=1) + int(target.zero_point)
    q = np.clip(q, QMIN, QMAX).astype(np.int8)
    if layer.lut is not None:
        _guard(layer.lut)
        q = layer.lut[q.astype(np.int64) - QMIN]
    return q


@dataclass
class Requant:
    """Fixed-point rescale of a centred int8 tensor from one scale to another."""

    m0: int
    shift: int

    @classmethod
    def between(cls, p_in: QuantParams, p_out: QuantParams, extra: float = 1.0) -> "Requant":
        m0, sh = quantize_multiplier(float(p_in.scale) * extra / float(p_out.scale))
        return cls(int(m0[0]), int(sh[0]))

    def apply(self, v: np.ndarray, frac_bits: int = 0) -> np.ndarray:
        """``round(v * M * 2**frac_bits)`` as int64."""
        sh = self.shift - frac_bits
        v = np.asarray(v, np.int64)
        _guard(v)
        if sh >= 1:
            return rshift_round(v * self.m0, sh)
        return (v * self.m0) << (-sh)


ADD_FRAC_BITS = 8


def int8_add(qa, pa: QuantParams, qb, pb: QuantParams, p_out: QuantParams, ra: Requant | None = None, rb: Requant | None = None):
    """Integer ``a + b`` with both operands rescaled to ``p_out`` (8 guard bits, one rounding)."""
    ra = ra or Requant.between(pa, p_out)
    rb = rb or Requant.between(pb, p_out)
    ta = ra.apply(qa.astype(np.int64) - int(pa.zero_point), ADD_FRAC_BITS)
    tb = rb.apply(qb.astype(np.int64) - int(pb.zero_point), ADD_FRAC_BITS)
    q = rshift_round(ta + tb, ADD_FRAC_BITS) + int(p_out.zero_point)
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def int8_mul(qa, pa: QuantParams, qb, pb: QuantParams, p_out: QuantParams, r: Requant | None = None):
    """Integer elementwise ``a * b`` requantized to ``p_out``."""
    if qa.shape != qb.shape:
        raise ShapeError("int8_mul", "shape", qa.shape, qb.shape)
    r = r or Requant.between(pa, p_out, extra=float(pb.scale))
    prod = (qa.astype(np.int64) - int(pa.zero_point)) * (qb.astype(np.int64) - int(pb.zero_point))
    q = r.apply(prod) + int(p_out.zero_point)
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def int8_rescale(q, p_in: QuantParams, p_out: QuantParams, r: Requant | None = None):
    r = r or Requant.between(p_in, p_out)
    v = r.apply(q.astype(np.int64) - int(p_in.zero_point)) + int(p_out.zero_point)
    return np.clip(v, QMIN, QMAX).astype(np.int8)


def int8_concat(qa, pa: QuantParams, qb, pb: QuantParams, p_out: QuantParams, ra=None, rb=None):
    """Channel concat of two int8 tensors into a shared output scale."""
    for i, dim in ((0, "n"), (2, "h"), (3, "w")):
        if qa.shape[i] != qb.shape[i]:
            raise ShapeError("int8_concat", dim, qa.shape[i], qb.shape[i])
    return np.concatenate([int8_rescale(qa, pa, p_out, ra), int8_rescale(qb, pb, p_out, rb)], axis=1)


def convert_model(model, **kwargs):
    """Convert a calibrated float/QAT detector into its integer-only form."""
    from .model import QuantizedDetector

    return QuantizedDetector.from_float(model, **kwargs)
