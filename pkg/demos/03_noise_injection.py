"""Gaussian noise injection and the 8-bit fixed-point convolution."""
import numpy as np

from redcane import QuantParams, conv2d, dequantize, fixed_point_conv, inject, quantize
from redcane.approx import exact_multiplier, truncated_multiplier

rng = np.random.default_rng(0)
x = rng.uniform(-2, 2, size=100_000)
for nm, na in ((0.01, 0.0), (0.1, 0.05)):
    d = inject(x, nm, na, np.random.default_rng(1)) - x
    print(f"NM {nm} NA {na}: measured std/R {d.std() / 4:.4f}, mean/R {d.mean() / 4:.4f}")

q = QuantParams(-2, 2)
err = np.abs(dequantize(quantize(x, q), q) - x).max()
print(f"8-bit roundtrip worst error {err:.5f} (half a step is {q.step / 2:.5f})")

img = rng.uniform(size=(8, 8, 1))
kern = rng.normal(size=(3, 3, 1, 4))
ref = conv2d(img, kern)
q_in, q_w = QuantParams.fit(img), QuantParams.fit(kern)
for mult in (exact_multiplier(), truncated_multiplier(4)):
    out = fixed_point_conv(img, kern, mult, q_in, q_w)
    print(f"{mult.name:7s} fixed-point conv, max deviation from float: {np.abs(out - ref).max():.4f}")
