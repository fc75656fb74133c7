"""Dense NCHW tensor primitives on numpy arrays.

A "tensor" here is a plain ``numpy.ndarray`` of shape ``(n, c, h, w)``,
row-major, with dtype float32 (float64 is accepted for gradient checking),
int8 or int32. Every function is pure: inputs are never written to.
The backward kernels used by :mod:`aqpcd.autograd` live alongside the
forward ones so the two stay in sync.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending dimension."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv geometry {self}")
        if self.groups not in (1, self.in_channels):
            raise ValueError("groups must be 1 or in_channels")
        if self.groups != 1 and self.out_channels != self.in_channels:
            raise ValueError("depthwise conv requires out_channels == in_channels")

    @property
    def depthwise(self) -> bool:
        return self.groups != 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        cin = 1 if self.groups != 1 else self.in_channels
        return (self.out_channels, cin, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 0 or wo < 0:
            raise ShapeError("conv2d", "H_out/W_out", ">= 0", (ho, wo))
        return ho, wo


def _check_conv(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError("conv2d", "rank", 4, x.ndim)
    if x.shape[1] != spec.in_channels:
        raise ShapeError("conv2d", "C_in", spec.in_channels, x.shape[1])
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError("conv2d", "weight", spec.weight_shape, tuple(weight.shape))


def _pad(x: np.ndarray, p: int, value=0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (n, c*k*k, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    if k == 1:
        cols = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        return np.ascontiguousarray(cols).reshape(n, c, ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, k, k) -> (n, c, k, k, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, shape_p: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to a padded input."""
    n, c = shape_p[:2]
    out = np.zeros(shape_p, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Zero-padded 2-D convolution (cross-correlation), standard or depthwise."""
    _check_conv(x, weight, spec)
    if spec.groups != 1:
        return depthwise_conv2d(x, weight, bias, spec)
    n, _, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    k = spec.kernel
    if n * ho * wo == 0:
        return np.zeros((n, spec.out_channels, ho, wo), dtype=x.dtype)
    cols = im2col(_pad(x, spec.padding), k, spec.stride, ho, wo)
    y = np.matmul(weight.reshape(spec.out_channels, -1), cols)
    if bias is not None:
        y += bias.reshape(1, -1, 1)
    return y.reshape(n, spec.out_channels, ho, wo)


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    k, s = spec.kernel, spec.stride
    xp = _pad(x, spec.padding)
    y = np.zeros((n, c, ho, wo), dtype=np.result_type(x, weight))
    for i in range(k):
        for j in range(k):
            y += xp[:, :, i : i + s * ho : s, j : j + s * wo : s] * weight[:, 0, i, j].reshape(1, c, 1, 1)
    if bias is not None:
        y += bias.reshape(1, c, 1, 1)
    return y


def conv2d_backward(x, weight, spec: ConvSpec, gy, need_x=True):
    """Gradients of :func:`conv2d` (without bias) w.r.t. input and weight."""
    n, c, h, w = x.shape
    ho, wo = gy.shape[2:]
    k, s, p = spec.kernel, spec.stride, spec.padding
    xp = _pad(x, p)
    if spec.groups != 1:
        gw = np.zeros_like(weight)
        gxp = np.zeros_like(xp) if need_x else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gy, xp[sl])
                if need_x:
                    gxp[sl] += gy * weight[:, 0, i, j].reshape(1, c, 1, 1)
    else:
        cols = im2col(xp, k, s, ho, wo)
        g2 = gy.reshape(n, spec.out_channels, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gxp = None
        if need_x:
            gcols = np.matmul(weight.reshape(spec.out_channels, -1).T, g2)
            gxp = col2im(gcols, xp.shape, k, s, ho, wo)
    gx = None
    if need_x:
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw


def depthwise_separable(x, dw_weight, pw_weight, spec: ConvSpec, dw_bias=None, pw_bias=None) -> np.ndarray:
    """Depthwise KxK conv (``spec`` geometry) followed by a 1x1 pointwise conv."""
    c = spec.in_channels
    if tuple(dw_weight.shape) != (c, 1, spec.kernel, spec.kernel):
        raise ShapeError("depthwise_separable", "dw_weight", (c, 1, spec.kernel, spec.kernel), tuple(dw_weight.shape))
    if tuple(pw_weight.shape) != (spec.out_channels, c, 1, 1):
        raise ShapeError("depthwise_separable", "pw_weight", (spec.out_channels, c, 1, 1), tuple(pw_weight.shape))
    dw = ConvSpec(spec.kernel, c, c, spec.stride, spec.padding, groups=c)
    pw = ConvSpec(1, c, spec.out_channels)
    return conv2d(conv2d(x, dw_weight, dw_bias, dw), pw_weight, pw_bias, pw)


def batch_norm(x, gamma, beta, running_mean, running_var, eps=BN_EPS, training=False, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation.

    Inference mode returns ``y``. Training mode normalises with batch
    statistics and returns ``(y, new_running_mean, new_running_var)``; the
    running buffers passed in are left untouched.
    """
    if eps < 0:
        raise ValueError("batch_norm eps must be >= 0")
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError("batch_norm", name, (c,), v.shape)
    if np.any(running_var < 0):
        raise ValueError("batch_norm running_var must be >= 0")
    shp = (1, c, 1, 1)
    if not training:
        if np.any(running_var + eps <= 0):
            raise ValueError("batch_norm needs running_var + eps > 0")
        inv = gamma / np.sqrt(running_var + eps)
        return x * inv.reshape(shp) + (beta - running_mean * inv).reshape(shp)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    y = (x - mean.reshape(shp)) / np.sqrt(var.reshape(shp) + eps) * gamma.reshape(shp) + beta.reshape(shp)
    m = x.size // c
    unbiased = var * m / max(m - 1, 1)
    new_mean = (1 - momentum) * running_mean + momentum * mean
    new_var = (1 - momentum) * running_var + momentum * unbiased
    return y, new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, "shape", a.shape, b.shape)


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape("elementwise_mul", a, b)
    return a * b


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape("elementwise_add", a, b)
    return a + b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    for i, dim in ((0, "n"), (2, "h"), (3, "w")):
        if a.shape[i] != b.shape[i]:
            raise ShapeError("concat_channels", dim, a.shape[i], b.shape[i])
    return np.concatenate([a, b], axis=1)
