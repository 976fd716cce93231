"""numba-compiled kernels; loop-level twins of ``_numpy``."""

import math

import numpy as np
from numba import njit

_GELU_C = math.sqrt(2.0 / math.pi)


@njit(cache=True)
def softmax_rows(x):
    m, n = x.shape
    out = np.empty_like(x)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(n):
            out[i, j] /= s
    return out


@njit(cache=True)
def softmax_rows_backward(y, gy):
    m, n = y.shape
    out = np.empty_like(y)
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


@njit(cache=True)
def log_softmax_rows(x):
    m, n = x.shape
    out = np.empty_like(x)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            s += math.exp(x[i, j] - mx)
        lse = math.log(s)
        for j in range(n):
            out[i, j] = x[i, j] - mx - lse
    return out


@njit(cache=True)
def log_softmax_rows_backward(y, gy):
    m, n = y.shape
    out = np.empty_like(y)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += gy[i, j]
        for j in range(n):
            out[i, j] = gy[i, j] - math.exp(y[i, j]) * s
    return out


@njit(cache=True)
def layer_norm_forward(x, gain, bias, eps):
    m, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(m)
    for i in range(m):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_backward(gy, xhat, rstd, gain):
    m, d = gy.shape
    gx = np.empty_like(gy)
    ggain = np.zeros(d)
    gbias = np.zeros(d)
    for i in range(m):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = gy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
        scale = rstd[i] / d
        for j in range(d):
            g = gy[i, j] * gain[j]
            gx[i, j] = scale * (d * g - s1 - xhat[i, j] * s2)
    return gx, ggain, gbias


@njit(cache=True, inline="always")
def _tanh(z):
    # libm tanh does not vectorize; the exp form is ~3x faster and saturates cleanly
    return 1.0 - 2.0 / (math.exp(2.0 * z) + 1.0)


@njit(cache=True)
def _gelu_flat(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + _tanh(_GELU_C * (v + 0.044715 * v * v * v)))
    return out


@njit(cache=True)
def _gelu_backward_flat(x, gy):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        t = _tanh(_GELU_C * (v + 0.044715 * v * v * v))
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        out[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out


def gelu(x):
    return _gelu_flat(np.ascontiguousarray(x).ravel()).reshape(x.shape)


def gelu_backward(x, gy):
    flat = _gelu_backward_flat(
        np.ascontiguousarray(x).ravel(), np.ascontiguousarray(gy).ravel()
    )
    return flat.reshape(x.shape)


@njit(cache=True)
def embedding_backward(ids, gy, n_rows):
    out = np.zeros((n_rows, gy.shape[1]))
    for i in range(ids.shape[0]):
        r = ids[i]
        for j in range(gy.shape[1]):
            out[r, j] += gy[i, j]
    return out


@njit(cache=True)
def average_ranks(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks
