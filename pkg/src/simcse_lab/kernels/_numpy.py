"""Pure-numpy reference kernels. Same signatures as the numba backend."""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_rows_backward(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_backward(gy, xhat, rstd, gain):
    d = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gxhat = gy * gain
    gx = (rstd[:, None] / d) * (
        d * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, ggain, gbias


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward(x, gy):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def embedding_backward(ids, gy, n_rows):
    out = np.zeros((n_rows, gy.shape[1]))
    np.add.at(out, ids, gy)
    return out


def average_ranks(x):
    """1-based ranks, ties share the mean of the positions they occupy."""
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks
