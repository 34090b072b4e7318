"""Slow, loop-based reference implementations used as independent oracles."""
import math

import numpy as np


def naive_conv2d(x, kernels, stride=1, padding="valid"):
    h, w, cin = x.shape
    k, _, _, cout = kernels.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - w, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        top = left = 0
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = 0.0
                for di in range(k):
                    for dj in range(k):
                        r, c = i * stride + di - top, j * stride + dj - left
                        if 0 <= r < h and 0 <= c < w:
                            for ci in range(cin):
                                acc += x[r, c, ci] * kernels[di, dj, ci, o]
                out[i, j, o] = acc
    return out


def naive_matmul(a, b):
    m, n = len(a), len(a[0])
    p = len(b[0])
    return np.array([[sum(a[i][k] * b[k][j] for k in range(n)) for j in range(p)] for i in range(m)])


def softmax_direct(v):
    e = [math.exp(t) for t in v]
    s = sum(e)
    return [t / s for t in e]


def squash_vec(s):
    n2 = sum(t * t for t in s)
    if n2 == 0:
        return [0.0] * len(s)
    n = math.sqrt(n2)
    return [n2 / (1 + n2) * t / n for t in s]


def scripted_routing(u_hat, r):
    """Dynamic routing for one sample, written with scalar loops."""
    ni, nj, d = u_hat.shape
    b = [[0.0] * nj for _ in range(ni)]
    for _ in range(r):
        k = [softmax_direct(b[i]) for i in range(ni)]
        v = []
        for j in range(nj):
            s = [sum(k[i][j] * u_hat[i, j, t] for i in range(ni)) for t in range(d)]
            v.append(squash_vec(s))
        for i in range(ni):
            for j in range(nj):
                b[i][j] += sum(u_hat[i, j, t] * v[j][t] for t in range(d))
    return np.array(b), np.array(k), np.array(v)


def two_pass_stats(values):
    values = [float(v) for v in values]
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def quantized_conv_oracle(x, kernels, mult_fn, q_in, q_w, stride=1, padding="valid"):
    """Integer-domain convolution with the same affine output mapping, via loops."""
    def q(v, qp):
        v = min(max(v, qp.min), qp.max)
        return int(math.floor((v - qp.min) / (qp.max - qp.min) * qp.levels + 0.5))

    h, w, cin = x.shape
    k, _, _, cout = kernels.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        top = max((ho - 1) * stride + k - h, 0) // 2
        left = max((wo - 1) * stride + k - w, 0) // 2
    else:
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        top = left = 0
    zero = q(0.0, q_in)
    dx, dw = q_in.step, q_w.step
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = sx = sw = taps = 0
                for di in range(k):
                    for dj in range(k):
                        r, c = i * stride + di - top, j * stride + dj - left
                        for ci in range(cin):
                            a = q(x[r, c, ci], q_in) if (0 <= r < h and 0 <= c < w) else zero
                            bq = q(kernels[di, dj, ci, o], q_w)
                            acc += mult_fn(a, bq)
                            sx += a
                            sw += bq
                            taps += 1
                out[i, j, o] = dx * dw * acc + q_in.min * dw * sw + q_w.min * dx * sx + taps * q_in.min * q_w.min
    return out
