"""Minimal float64 tensors with tape-based reverse-mode differentiation.

Only the operations MobileNet1D needs are provided. Operations are recorded
while a :class:`Tape` is active (``with Tape() as tape: ...``) and at least one
input requires a gradient; outside a tape everything runs as plain numpy.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ContractError, DimensionError, ParameterError

_active_tape: contextvars.ContextVar = contextvars.ContextVar("ammobilenet_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class TapeNode:
    inputs: tuple
    output: Tensor
    backward: Callable  # grad_out -> tuple of input grads (None where not needed)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(tuple(inputs), out, backward_fn))
    return out


def backward(loss, tape):
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``.

    Gradients are added to any ``.grad`` already present, so fan-out and
    repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise ContractError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    touched = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = t
        _accumulate(node.output, g)
    for key, g in grads.items():
        _accumulate(touched[key], g)


def _accumulate(t, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g if t.grad is None else t.grad + g


# ----------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, factor):
    factor = float(factor)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


def tensor_sum(x):
    shape = x.shape
    return _record(np.sum(x.data), (x,), lambda g: (np.full(shape, float(g)),))


def tensor_mean(x):
    shape, n = x.shape, x.size
    return _record(np.mean(x.data), (x,), lambda g: (np.full(shape, float(g) / n),))


def relu6(x):
    d = x.data
    return _record(_kernels.relu6_forward(d), (x,), lambda g: (_kernels.relu6_backward(g, d),))


# ----------------------------------------------------------------- convolution

def conv1d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 1D cross-correlation. x [B,Cin,L], weight [Cout,Cin/groups,K]."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d: input must be [B, C, L], got shape {x.shape}")
    if weight.data.ndim != 3:
        raise DimensionError(f"conv1d: weight must be [Cout, Cin/groups, K], got shape {weight.shape}")
    if stride < 1 or groups < 1 or padding < 0:
        raise ParameterError(f"conv1d: bad stride={stride}, padding={padding}, groups={groups}")
    B, cin, L = x.shape
    cout, cg, K = weight.shape
    if cin % groups:
        raise DimensionError(f"conv1d: input channel axis ({cin}) not divisible by groups={groups}")
    if cout % groups:
        raise DimensionError(f"conv1d: output channel axis ({cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise DimensionError(
            f"conv1d: weight axis 1 is {cg}, expected Cin/groups = {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv1d: bias axis 0 is {bias.shape}, expected ({cout},)")
    lout = (L + 2 * padding - K) // stride + 1
    if L + 2 * padding < K or lout < 1:
        raise DimensionError("conv1d: window longer than padded input")

    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    lp = xpad.shape[2]
    w = weight.data
    span = stride * (lout - 1) + 1

    if groups == cin and cg == 1 and cout == cin:
        out = _kernels.dw_forward(xpad, w[:, 0, :], stride, lout)

        def bw(g):
            gx = _kernels.dw_backward_input(g, w[:, 0, :], stride, lp)
            gw = _kernels.dw_backward_weight(g, xpad, stride, K)[:, None, :]
            return _unpad(gx, padding), gw

    elif groups == 1 and K == 1:
        xs = xpad[:, :, 0:span:stride]
        out = np.matmul(w[:, :, 0], xs)

        def bw(g):
            gw = np.tensordot(g, xs, axes=([0, 2], [0, 2]))[:, :, None]
            gx = np.zeros_like(xpad)
            gx[:, :, 0:span:stride] = np.matmul(w[:, :, 0].T, g)
            return _unpad(gx, padding), gw

    else:
        og = cout // groups
        win = sliding_window_view(xpad, K, axis=2)[:, :, 0:span:stride]
        win = win.reshape(B, groups, cg, lout, K)
        wg = w.reshape(groups, og, cg, K)
        out = np.einsum("bgilk,goik->bgol", win, wg, optimize=True).reshape(B, cout, lout)

        def bw(g):
            gg = g.reshape(B, groups, og, lout)
            gw = np.einsum("bgol,bgilk->goik", gg, win, optimize=True).reshape(w.shape)
            gwin = np.einsum("bgol,goik->bgilk", gg, wg, optimize=True).reshape(B, cin, lout, K)
            gx = np.zeros_like(xpad)
            for k in range(K):
                gx[:, :, k:k + span:stride] += gwin[..., k]
            return _unpad(gx, padding), gw

    if bias is not None:
        out = out + bias.data[None, :, None]
        inputs = (x, weight, bias)

        def bw_b(g, _inner=bw):
            gx, gw = _inner(g)
            return gx, gw, g.sum(axis=(0, 2))

        return _record(out, inputs, bw_b)
    return _record(out, (x, weight), bw)


def _unpad(gx, padding):
    return gx[:, :, padding:gx.shape[2] - padding] if padding else gx


# ----------------------------------------------------------------- normalization

def batchnorm1d(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (batch, length).

    Train mode normalizes with the biased batch variance and folds the mean
    and the unbiased variance into the running buffers (modified in place).
    """
    if eps <= 0:
        raise ParameterError(f"batchnorm1d: eps must be > 0, got {eps}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm1d: mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm1d: input must be [B, C, L], got shape {x.shape}")
    B, C, L = x.shape
    for nm, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                  ("running_var", running_var)):
        if t.shape != (C,):
            raise DimensionError(f"batchnorm1d: {nm} has shape {t.shape}, channel axis needs ({C},)")
    d = x.data

    if mode == "train":
        n = B * L
        if n < 2:
            raise ParameterError("batchnorm1d: insufficient elements for batch statistics")
        out, xhat, mean, var, inv = _kernels.bn_train_forward(d, gamma.data, beta.data, eps)
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var * (n / (n - 1))
        gdata = gamma.data

        def bw(g):
            gx, ggamma, gbeta = _kernels.bn_backward(g, xhat, gdata, inv)
            return gx, ggamma, gbeta, None, None

        return _record(out, (x, gamma, beta, running_mean, running_var), bw)

    gd = gamma.data[None, :, None]
    inv = 1.0 / np.sqrt(running_var.data + eps)
    xhat = (d - running_mean.data[None, :, None]) * inv[None, :, None]

    def bw_eval(g):
        gx = g * gd * inv[None, :, None]
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2)), None, None

    out = xhat * gd + beta.data[None, :, None]
    return _record(out, (x, gamma, beta, running_mean, running_var), bw_eval)


def global_avg_pool1d(x):
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool1d: input must be [B, C, L], got shape {x.shape}")
    B, C, L = x.shape
    if L < 1:
        raise DimensionError("global_avg_pool1d: length axis is empty")
    out = x.data.mean(axis=2)
    return _record(out, (x,), lambda g: (np.repeat(g[:, :, None] / L, L, axis=2),))


# ----------------------------------------------------------------- dense

def linear(x, weight, bias=None):
    """x [B,Din] @ weight[Dout,Din]^T + bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input feature axis is {x.shape[1]}, weight expects {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _record(out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match output axis {weight.shape[0]}")
    out = out + bias.data[None, :]
    return _record(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def l2_normalize_rows(x, eps=0.0):
    """Row-wise x / (||x|| + eps)."""
    d = x.data
    norm = np.sqrt(np.sum(d * d, axis=1, keepdims=True))
    denom = norm + eps
    if np.any(denom == 0.0):
        raise ParameterError("l2_normalize_rows: zero-norm row with eps=0 (division by zero)")
    out = d / denom

    def bw(g):
        # d/dx [x / (|x| + eps)] = I/denom - x x^T / (|x| denom^2)
        dot = np.sum(g * d, axis=1, keepdims=True)
        safe = np.where(norm > 0.0, norm, 1.0)
        return (g / denom - d * dot / (safe * denom * denom),)

    return _record(out, (x,), bw)


def add_target_offset(logits, targets, offset):
    """Add ``offset`` to each row's target entry (constant one-hot shift)."""
    out = logits.data.copy()
    rows = np.arange(out.shape[0])
    out[rows, targets] += offset
    return _record(out, (logits,), lambda g: (g,))


# ----------------------------------------------------------------- softmax

def log_softmax(z):
    """Numerically stable log-softmax over the last axis of a numpy array."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    B = logits.shape[0]
    lsm = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -np.mean(lsm[rows, targets])

    def bw(g):
        p = np.exp(lsm)
        p[rows, targets] -= 1.0
        return (p * (float(g) / B),)

    return _record(np.asarray(loss), (logits,), bw)


# ----------------------------------------------------------------- checking

def grad_check(f, x, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must not depend on state it
    mutates between calls.
    """
    if h <= 0:
        raise ParameterError(f"grad_check: h must be > 0, got {h}")
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.data.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
    backward(y, tape)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0

