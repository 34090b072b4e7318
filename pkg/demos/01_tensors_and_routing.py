"""Convolution, squash and dynamic routing on small random tensors."""
import numpy as np

from redcane import conv2d, dynamic_routing, squash

rng = np.random.default_rng(0)

x = rng.uniform(size=(1, 6, 6, 2))
k = rng.normal(size=(3, 3, 2, 4))
print("conv2d valid:", conv2d(x, k).shape, " same, stride 2:", conv2d(x, k, stride=2, padding="same").shape)

s = rng.normal(size=(5, 8)) * np.array([[0.01], [0.1], [1], [10], [100]])
print("squash norms:", np.round(np.linalg.norm(squash(s), axis=-1), 4))

u_hat = rng.normal(size=(32, 10, 8))
state = dynamic_routing(u_hat, r=3)
sums = state.k_clean[-1].sum(axis=-1)
print(f"coupling sums over outputs: min {sums.min():.12f} max {sums.max():.12f}")
print("output capsule lengths:", np.round(np.linalg.norm(state.v, axis=-1), 3))
