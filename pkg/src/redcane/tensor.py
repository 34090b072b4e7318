"""Dense numeric kernels used by the capsule network forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order and float64.
Spatial tensors use the channels-last layout ``[H, W, C]`` or, batched,
``[N, H, W, C]``; convolution kernels are ``[k, k, Cin, Cout]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Range",
    "conv2d",
    "conv2d_backward",
    "conv_output_size",
    "matmul",
    "range_of",
    "relu",
    "softmax_axis",
    "softmax_backward",
    "squash",
    "squash_backward",
]

PADDINGS = ("same", "valid")


@dataclass(frozen=True)
class Range:
    """Value range of a tensor; ``span`` is the R used to scale noise."""

    min: float
    max: float

    def __post_init__(self):
        if self.max < self.min:
            raise ValueError(f"range max {self.max} < min {self.min}")

    @property
    def span(self) -> float:
        return self.max - self.min


def range_of(x) -> Range:
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("range of an empty tensor is undefined")
    return Range(float(x.min()), float(x.max()))


def _padding(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_size) along one spatial axis."""
    if padding == "valid":
        if k > size:
            raise ValueError(f"kernel size {k} exceeds input size {size} with valid padding")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"unknown padding {padding!r}, expected one of {PADDINGS}")


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    return _padding(size, k, stride, padding)[2]


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"conv2d input must be [H,W,C] or [N,H,W,C], got shape {x.shape}")


def _im2col(x, k, stride, padding):
    n, h, w, c = x.shape
    top, bottom, ho = _padding(h, k, stride, padding)
    left, right, wo = _padding(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # [N,Ho,Wo,C,k,k] -> [N,Ho,Wo,k,k,C] so the flat order matches kernels[k,k,Cin,:]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, k * k * c)
    return cols, xp.shape, (top, left)


def _check_kernels(x, kernels, stride):
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ValueError(f"kernels must be [k,k,Cin,Cout], got shape {kernels.shape}")
    if kernels.shape[2] != x.shape[-1]:
        raise ValueError(
            f"input has {x.shape[-1]} channels but kernels expect {kernels.shape[2]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return kernels


def conv2d(x, kernels, stride: int = 1, padding: str = "valid", bias=None):
    """2-D cross-correlation, channels last.

    Accepts a single image ``[H, W, Cin]`` or a batch ``[N, H, W, Cin]`` and
    returns the matching rank. Each output element is the sum of ``k*k*Cin``
    products (plus ``bias`` when given).
    """
    xb, single = _as_batch(x)
    kernels = _check_kernels(xb, kernels, stride)
    k, cout = kernels.shape[0], kernels.shape[3]
    cols, _, _ = _im2col(xb, k, stride, padding)
    out = cols @ kernels.reshape(-1, cout)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out[0] if single else out


def conv2d_backward(x, kernels, grad_out, stride: int = 1, padding: str = "valid"):
    """Gradients of ``conv2d`` w.r.t. input, kernels and bias.

    ``x`` and ``grad_out`` must be batched. Returns ``(dx, dkernels, dbias)``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    k, cin, cout = kernels.shape[0], kernels.shape[2], kernels.shape[3]
    cols, padded_shape, (top, left) = _im2col(x, k, stride, padding)
    n, ho, wo, _ = grad_out.shape
    g = grad_out.reshape(-1, cout)
    dkernels = (cols.reshape(-1, k * k * cin).T @ g).reshape(kernels.shape)
    dbias = g.sum(axis=0)
    dcols = (g @ kernels.reshape(-1, cout).T).reshape(n, ho, wo, k, k, cin)
    dxp = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    h, w = x.shape[1], x.shape[2]
    return dxp[:, top : top + h, left : left + w, :], dkernels, dbias


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def softmax_axis(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, grad_y, axis: int = -1):
    """Vector-Jacobian product of softmax given its output ``y``."""
    return y * (grad_y - (grad_y * y).sum(axis=axis, keepdims=True))


def squash(s, axis: int = -1):
    """Capsule non-linearity: ``v = |s|^2 / (1 + |s|^2) * s / |s|``.

    Written as ``s * |s| / (1 + |s|^2)``, which is the same map and evaluates
    to the zero vector at ``s = 0`` without a division by zero.
    """
    s = np.asarray(s, dtype=np.float64)
    n = _norm(s, axis)
    return s * (n / (1.0 + n * n))


def _norm(s, axis):
    # scaled by the largest component so tiny vectors do not underflow to norm 0
    m = np.abs(s).max(axis=axis, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    return m * np.sqrt(((s / safe) ** 2).sum(axis=axis, keepdims=True))


def squash_backward(s, grad_v, axis: int = -1):
    n = _norm(np.asarray(s, dtype=np.float64), axis)
    f = n / (1.0 + n * n)
    # d f / d n divided by n; the s s^T term vanishes as s -> 0
    with np.errstate(divide="ignore", invalid="ignore"):
        fp_over_n = np.where(n > 0, (1.0 - n * n) / (1.0 + n * n) ** 2 / n, 0.0)
    return f * grad_v + fp_over_n * (s * grad_v).sum(axis=axis, keepdims=True) * s


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
