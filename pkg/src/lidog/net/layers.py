"""Differentiable layers as forward/backward function pairs.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache and returns gradients for inputs and parameters.
All arrays are float64.
"""

import numpy as np

from .._ext import fallback, kernels
from .sparse import Rulebook

BN_EPS = 1e-5
# above this cin * cout, gather + BLAS matmul beats the compiled per-pair loop
GEMM_MIN_WIDTH = 64


def _conv_kernels(w):
    return kernels if w.shape[1] * w.shape[2] <= GEMM_MIN_WIDTH else fallback


def sparse_conv_forward(x, w, rb: Rulebook):
    x = np.ascontiguousarray(x)
    y = _conv_kernels(w).sparse_conv_forward(x, w, rb.rb_in, rb.rb_out, rb.ptr, rb.n_out)
    return y, (x, w, rb)


def sparse_conv_backward(gy, cache):
    x, w, rb = cache
    k = _conv_kernels(w)
    gx, gw = k.sparse_conv_backward(np.ascontiguousarray(gy), x, w, rb.rb_in, rb.rb_out, rb.ptr)
    return gx, gw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=BN_EPS):
    """Batch norm over rows of ``x`` (N, C).

    In training mode returns updated running statistics in the cache; the caller
    decides whether to keep them.
    """
    if training:
        n = x.shape[0]
        mean = x.mean(axis=0)
        xc = x - mean
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var * n / (n - 1) if n > 1 else var
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
        cache = (True, xhat, inv, gamma, (new_mean, new_var))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv
        cache = (False, xhat, inv, gamma, (running_mean, running_var))
    return gamma * xhat + beta, cache


def batchnorm_backward(gy, cache):
    training, xhat, inv, gamma, _ = cache
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    if training:
        n = gy.shape[0]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
    else:
        gx = gxhat * inv
    return gx, ggamma, gbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(gy, mask):
    return gy * mask


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(gy, cache):
    x, w = cache
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def scatter_forward(feats, winners, n_images, height, width):
    """Copy each winning voxel's feature row into its BEV pixel; empty pixels stay zero.

    ``winners`` is (n_images * height * width,) with -1 for empty pixels.
    """
    c = feats.shape[1]
    dense = np.zeros((winners.shape[0], c))
    occ = winners >= 0
    dense[occ] = feats[winners[occ]]
    return dense.reshape(n_images, height, width, c), (winners, occ, feats.shape[0])


def scatter_backward(gy, cache):
    winners, occ, n = cache
    g = gy.reshape(-1, gy.shape[-1])
    gx = np.zeros((n, g.shape[1]))
    # a voxel wins at most one pixel, so plain fancy assignment is exact
    gx[winners[occ]] = g[occ]
    return gx


def maxpool_forward(x, window, stride, pad):
    x = np.ascontiguousarray(x)
    y, arg = kernels.maxpool2d_forward(x, window, stride, pad)
    return y, (arg, x.shape)


def maxpool_backward(gy, cache):
    arg, shape = cache
    return kernels.maxpool2d_backward(np.ascontiguousarray(gy), arg, shape[1], shape[2])


def _im2col3(x):
    nb, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((nb, h, w, 9, c))
    for t in range(9):
        dr, ds = divmod(t, 3)
        cols[:, :, :, t, :] = xp[:, dr : dr + h, ds : ds + w, :]
    return cols.reshape(nb * h * w, 9 * c)


def conv2d_forward(x, w, b=None):
    """3x3 convolution, stride 1, zero padding 1. ``w`` is (3, 3, Cin, Cout)."""
    nb, h, wd, _ = x.shape
    cols = _im2col3(x)
    y = cols @ w.reshape(-1, w.shape[-1])
    if b is not None:
        y += b
    return y.reshape(nb, h, wd, w.shape[-1]), (cols, x.shape, w)


def conv2d_backward(gy, cache):
    cols, shape, w = cache
    nb, h, wd, c = shape
    g = gy.reshape(-1, gy.shape[-1])
    gw = (cols.T @ g).reshape(w.shape)
    gb = g.sum(axis=0)
    gcols = (g @ w.reshape(-1, w.shape[-1]).T).reshape(nb, h, wd, 9, c)
    gxp = np.zeros((nb, h + 2, wd + 2, c))
    for t in range(9):
        dr, ds = divmod(t, 3)
        gxp[:, dr : dr + h, ds : ds + wd, :] += gcols[:, :, :, t, :]
    return gxp[:, 1:-1, 1:-1, :], gw, gb


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(gp, p, axis=-1):
    return p * (gp - (gp * p).sum(axis=axis, keepdims=True))
