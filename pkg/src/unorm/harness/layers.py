"""Hand-differentiated building blocks for the desk-scale models."""

from __future__ import annotations

import numpy as np

_K = np.sqrt(2.0 / np.pi)
_C3 = 0.044715


def linear_forward(x, w, b):
    return x @ w.T + b


def linear_backward(dy, x, w):
    """Returns (dx, dw, db)."""
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def gelu_forward(a):
    t = np.tanh(_K * (a + _C3 * a ** 3))
    return 0.5 * a * (1.0 + t), t


def gelu_backward(dg, a, t):
    return dg * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _K * (1.0 + 3 * _C3 * a * a))


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(q, k, v):
    """Single-head attention over (B, N, C) tensors."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    a = softmax(q @ k.transpose(0, 2, 1) * scale)
    return a @ v, (q, k, v, a, scale)


def attention_backward(do, cache):
    q, k, v, a, scale = cache
    da = do @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ do
    ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
    dq = ds @ k * scale
    dk = ds.transpose(0, 2, 1) @ q * scale
    return dq, dk, dv
