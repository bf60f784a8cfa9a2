"""Hot kernels: depthwise convolution, batch norm, ReLU6.

Two implementations of each kernel live here: a numba ``@njit`` version and a
pure-numpy version. ``AMMOBILENET_NO_NUMBA=1`` (or numba being absent) selects
the numpy path at import time. Both paths accumulate in a fixed order, so
each is deterministic on its own; they agree to within float rounding.

Depthwise shapes: xpad [B, C, Lp] (zero-padded), weight [C, K], out [B, C, Lout].
Batch-norm kernels reduce over (B, L) per channel.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_disabled = os.environ.get("AMMOBILENET_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")
USE_NUMBA = numba is not None and not _disabled
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def dw_forward_numpy(xpad, weight, stride, lout):
    B, C, _ = xpad.shape
    K = weight.shape[1]
    out = np.zeros((B, C, lout))
    span = stride * (lout - 1) + 1
    for k in range(K):
        out += xpad[:, :, k:k + span:stride] * weight[None, :, k, None]
    return out


def dw_backward_input_numpy(grad, weight, stride, lp):
    B, C, lout = grad.shape
    K = weight.shape[1]
    gx = np.zeros((B, C, lp))
    span = stride * (lout - 1) + 1
    for k in range(K):
        gx[:, :, k:k + span:stride] += grad * weight[None, :, k, None]
    return gx


def dw_backward_weight_numpy(grad, xpad, stride, ksize):
    B, C, lout = grad.shape
    gw = np.zeros((C, ksize))
    span = stride * (lout - 1) + 1
    for k in range(ksize):
        gw[:, k] = np.einsum("bcl,bcl->c", grad, xpad[:, :, k:k + span:stride])
    return gw


def bn_train_forward_numpy(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None]
    return xhat * gamma[None, :, None] + beta[None, :, None], xhat, mean, var, inv


def bn_backward_numpy(grad, xhat, gamma, inv):
    n = grad.shape[0] * grad.shape[2]
    gxhat = grad * gamma[None, :, None]
    s1 = gxhat.sum(axis=(0, 2))[None, :, None]
    s2 = (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
    gx = (inv[None, :, None] / n) * (n * gxhat - s1 - xhat * s2)
    return gx, (grad * xhat).sum(axis=(0, 2)), grad.sum(axis=(0, 2))


def relu6_forward_numpy(x):
    return np.minimum(np.maximum(x, 0.0), 6.0)


def relu6_backward_numpy(grad, x):
    return grad * ((x > 0.0) & (x < 6.0))


# ---------------------------------------------------------------- numba path

if numba is not None:

    @numba.njit(cache=True)
    def dw_forward_numba(xpad, weight, stride, lout):
        B, C, _ = xpad.shape
        K = weight.shape[1]
        out = np.zeros((B, C, lout))
        for b in range(B):
            for c in range(C):
                for i in range(lout):
                    base = i * stride
                    acc = 0.0
                    for k in range(K):
                        acc += xpad[b, c, base + k] * weight[c, k]
                    out[b, c, i] = acc
        return out

    @numba.njit(cache=True)
    def dw_backward_input_numba(grad, weight, stride, lp):
        B, C, lout = grad.shape
        K = weight.shape[1]
        gx = np.zeros((B, C, lp))
        for b in range(B):
            for c in range(C):
                for i in range(lout):
                    g = grad[b, c, i]
                    base = i * stride
                    for k in range(K):
                        gx[b, c, base + k] += g * weight[c, k]
        return gx

    @numba.njit(cache=True)
    def dw_backward_weight_numba(grad, xpad, stride, ksize):
        B, C, lout = grad.shape
        gw = np.zeros((C, ksize))
        for c in range(C):
            for k in range(ksize):
                acc = 0.0
                for b in range(B):
                    for i in range(lout):
                        acc += grad[b, c, i] * xpad[b, c, i * stride + k]
                gw[c, k] = acc
        return gw

    @numba.njit(cache=True)
    def bn_train_forward_numba(x, gamma, beta, eps):
        B, C, L = x.shape
        n = B * L
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        mean = np.zeros(C)
        var = np.zeros(C)
        inv = np.zeros(C)
        for c in range(C):
            acc = 0.0
            for b in range(B):
                for i in range(L):
                    acc += x[b, c, i]
            m = acc / n
            acc = 0.0
            for b in range(B):
                for i in range(L):
                    d = x[b, c, i] - m
                    acc += d * d
            v = acc / n
            r = 1.0 / np.sqrt(v + eps)
            mean[c] = m
            var[c] = v
            inv[c] = r
            gm = gamma[c]
            bt = beta[c]
            for b in range(B):
                for i in range(L):
                    h = (x[b, c, i] - m) * r
                    xhat[b, c, i] = h
                    out[b, c, i] = h * gm + bt
        return out, xhat, mean, var, inv

    @numba.njit(cache=True)
    def bn_backward_numba(grad, xhat, gamma, inv):
        B, C, L = grad.shape
        n = B * L
        gx = np.empty_like(grad)
        ggamma = np.zeros(C)
        gbeta = np.zeros(C)
        for c in range(C):
            sg = 0.0
            sgx = 0.0
            for b in range(B):
                for i in range(L):
                    g = grad[b, c, i]
                    sg += g
                    sgx += g * xhat[b, c, i]
            ggamma[c] = sgx
            gbeta[c] = sg
            gm = gamma[c]
            scale = inv[c] * gm / n
            for b in range(B):
                for i in range(L):
                    gx[b, c, i] = scale * (n * grad[b, c, i] - sg - xhat[b, c, i] * sgx)
        return gx, ggamma, gbeta

    @numba.njit(cache=True)
    def relu6_forward_numba(x):
        flat = x.ravel()
        out = np.empty(flat.size)
        for i in range(flat.size):
            v = flat[i]
            out[i] = 0.0 if v < 0.0 else (6.0 if v > 6.0 else v)
        return out.reshape(x.shape)

    @numba.njit(cache=True)
    def relu6_backward_numba(grad, x):
        gf = grad.ravel()
        xf = x.ravel()
        out = np.empty(gf.size)
        for i in range(gf.size):
            v = xf[i]
            out[i] = gf[i] if (v > 0.0 and v < 6.0) else 0.0
        return out.reshape(grad.shape)

else:  # pragma: no cover
    dw_forward_numba = dw_backward_input_numba = dw_backward_weight_numba = None
    bn_train_forward_numba = bn_backward_numba = None
    relu6_forward_numba = relu6_backward_numba = None


def _contig(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if USE_NUMBA:

    def dw_forward(xpad, weight, stride, lout):
        return dw_forward_numba(_contig(xpad), _contig(weight), stride, lout)

    def dw_backward_input(grad, weight, stride, lp):
        return dw_backward_input_numba(_contig(grad), _contig(weight), stride, lp)

    def dw_backward_weight(grad, xpad, stride, ksize):
        return dw_backward_weight_numba(_contig(grad), _contig(xpad), stride, ksize)

    def bn_train_forward(x, gamma, beta, eps):
        return bn_train_forward_numba(_contig(x), _contig(gamma), _contig(beta), eps)

    def bn_backward(grad, xhat, gamma, inv):
        return bn_backward_numba(_contig(grad), _contig(xhat), _contig(gamma), _contig(inv))

    def relu6_forward(x):
        return relu6_forward_numba(_contig(x))

    def relu6_backward(grad, x):
        return relu6_backward_numba(_contig(grad), _contig(x))

else:
    dw_forward = dw_forward_numpy
    dw_backward_input = dw_backward_input_numpy
    dw_backward_weight = dw_backward_weight_numpy
    bn_train_forward = bn_train_forward_numpy
    bn_backward = bn_backward_numpy
    relu6_forward = relu6_forward_numpy
    relu6_backward = relu6_backward_numpy
