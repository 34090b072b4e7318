"""Quantization, range-scaled Gaussian noise injection and fixed-point convolution.

Noise with magnitude ``nm`` and average ``na`` added to a tensor ``X`` is

    delta = N(0, (nm * R)^2) + na * R,      X' = X + delta

where ``R = max(X) - min(X)`` is measured on the tensor being perturbed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .approx import MultiplierModel
from .sites import GroupId, Site
from .tensor import _padding

ACC_LIMIT = 2**31 - 1


@dataclass(frozen=True)
class QuantParams:
    min: float
    max: float
    bits: int = 8

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError(f"quantization range is empty: min={self.min}, max={self.max}")
        if self.bits < 2:
            raise ValueError(f"bit width must be >= 2, got {self.bits}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def step(self) -> float:
        return (self.max - self.min) / self.levels

    @classmethod
    def fit(cls, x, bits: int = 8) -> "QuantParams":
        x = np.asarray(x)
        lo, hi = float(x.min()), float(x.max())
        if hi == lo:
            hi = lo + 1.0
        return cls(lo, hi, bits)


def quantize(x, q: QuantParams) -> np.ndarray:
    """Integer codes in ``[0, 2^b - 1]``; out-of-range inputs are clamped first."""
    x = np.clip(np.asarray(x, dtype=np.float64), q.min, q.max)
    scaled = (x - q.min) / (q.max - q.min) * q.levels
    # scaled >= 0, so half-away-from-zero is floor(v + 0.5)
    return np.floor(scaled + 0.5).astype(np.int64)


def dequantize(codes, q: QuantParams) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) / q.levels * (q.max - q.min) + q.min


# --------------------------------------------------------------------------
# injection


def inject(x, nm: float, na: float, rng, sample_axis: int | None = None) -> np.ndarray:
    """Return ``x`` plus Gaussian noise scaled by the range of ``x``.

    With ``sample_axis`` set, the range is measured separately for every slice
    along that axis (one range per sample of a batch).
    """
    x = np.asarray(x, dtype=np.float64)
    if nm == 0 and na == 0:
        return x
    if sample_axis is None:
        span = np.float64(x.max() - x.min()) if x.size else np.float64(0.0)
    else:
        axes = tuple(i for i in range(x.ndim) if i != sample_axis % x.ndim)
        span = x.max(axis=axes, keepdims=True) - x.min(axis=axes, keepdims=True)
    noise = rng.standard_normal(x.shape) * (nm * span) if nm else 0.0
    return x + (noise + na * span)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise parameters for every site of ``group`` (optionally one layer/site)."""

    group: GroupId
    nm: float
    na: float = 0.0
    seed: int = 0
    layer: str | None = None

    def __post_init__(self):
        if self.nm < 0:
            raise ValueError(f"noise magnitude must be >= 0, got {self.nm}")
        object.__setattr__(self, "group", GroupId(self.group))

    def matches(self, site: Site) -> bool:
        if site.group != self.group:
            return False
        return self.layer is None or self.layer in (site.name, site.layer)


class Injector:
    """Applies the matching noise specs to each site's output.

    The random stream for a site is a pure function of the NoiseSpec seed, the site
    name and the ``key`` passed by the caller (batch index, routing
    iteration), so an injector holds no mutable state and identical calls give
    identical noise.
    """

    def __init__(self, specs=()):
        self.specs = tuple(specs)

    def __bool__(self):
        return any(s.nm or s.na for s in self.specs)

    def __repr__(self):
        return f"Injector({list(self.specs)!r})"

    def __call__(self, x, site: Site, key=()):
        for spec in self.specs:
            if spec.matches(site) and (spec.nm or spec.na):
                ss = np.random.SeedSequence(
                    spec.seed, spawn_key=(zlib.crc32(site.name.encode()), *key)
                )
                x = inject(x, spec.nm, spec.na, np.random.default_rng(ss), sample_axis=0)
        return x


NULL_INJECTOR = Injector()


# --------------------------------------------------------------------------
# fixed-point convolution


def _int_windows(codes, k, stride, padding, pad_code):
    n, h, w, c = codes.shape
    top, bottom, ho = _padding(h, k, stride, padding)
    left, right, wo = _padding(w, k, stride, padding)
    xp = np.pad(codes, ((0, 0), (top, bottom), (left, right), (0, 0)), constant_values=pad_code)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, k * k * c)


def affine_output(acc, sum_x, sum_w, taps: int, q_in: QuantParams, q_w: QuantParams):
    """Map integer accumulators back to real units.

    With ``x = xmin + dx*qx`` and ``w = wmin + dw*qw`` a dot product over
    ``taps`` terms expands to
    ``dx*dw*sum(qx*qw) + xmin*dw*sum(qw) + wmin*dx*sum(qx) + taps*xmin*wmin``.
    Only the ``sum(qx*qw)`` term goes through the (approximate) multiplier.
    """
    dx, dw = q_in.step, q_w.step
    return dx * dw * acc + q_in.min * dw * sum_w + q_w.min * dx * sum_x + taps * q_in.min * q_w.min


def fixed_point_conv(x, kernels, mult: MultiplierModel, q_in: QuantParams, q_w: QuantParams,
                     stride: int = 1, padding: str = "valid"):
    """8-bit convolution whose products come from ``mult``.

    Operands are quantized with ``q_in`` / ``q_w``; padded positions hold the
    code of real zero. Products accumulate in 64-bit integers and anything
    above the 32-bit accumulator limit raises ``OverflowError``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[2] != x.shape[-1]:
        raise ValueError(f"kernels {kernels.shape} do not match input channels {x.shape[-1]}")
    k, cout = kernels.shape[0], kernels.shape[3]
    qx = quantize(x, q_in)
    qw = quantize(kernels, q_w).reshape(-1, cout)
    pad_code = int(quantize(0.0, q_in))
    cols = _int_windows(qx, k, stride, padding, pad_code)
    taps = cols.shape[-1]
    acc = np.empty(cols.shape[:-1] + (cout,), dtype=np.int64)
    for o in range(cout):
        acc[..., o] = mult.products(cols, np.broadcast_to(qw[:, o], cols.shape)).sum(axis=-1)
    if acc.size and acc.max() > ACC_LIMIT:
        raise OverflowError(f"accumulator reached {int(acc.max())}, above the 32-bit limit")
    sum_x = cols.sum(axis=-1, keepdims=True)
    sum_w = qw.sum(axis=0)
    out = affine_output(acc, sum_x, sum_w, taps, q_in, q_w)
    return out[0] if single else out
