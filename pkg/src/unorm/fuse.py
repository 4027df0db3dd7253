"""Fold a frozen offline normalization into the linear layer that consumes it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


@dataclass
class LinearLayer:
    weight: np.ndarray  # (C_out, C)
    bias: np.ndarray  # (C_out,)

    def __call__(self, x):
        return np.asarray(x) @ self.weight.T + self.bias


@dataclass
class FusedAffinePair:
    weight_prime: np.ndarray
    bias_prime: np.ndarray

    def __call__(self, x):
        return np.asarray(x) @ self.weight_prime.T + self.bias_prime


def fuse_into_linear(gamma, beta, mu, sigma2, eps: float, layer: LinearLayer) -> FusedAffinePair:
    """W' = W * diag(gamma/sigma), b' = b + W (beta - gamma/sigma * mu),
    with sigma = sqrt(sigma2 + eps) so the result matches the unfused path."""
    gamma, beta, mu, sigma2 = (np.asarray(v, dtype=np.float64) for v in (gamma, beta, mu, sigma2))
    w = np.asarray(layer.weight, dtype=np.float64)
    b = np.asarray(layer.bias, dtype=np.float64)
    c = gamma.shape[0]
    if any(v.shape != (c,) for v in (beta, mu, sigma2)):
        raise ValueError("normalization vectors must share one channel count")
    if w.ndim != 2 or w.shape[1] != c:
        raise ValueError(f"linear weight {w.shape} does not consume {c} channels")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    if np.any(~(sigma2 > 0)):
        raise ValueError("sigma2 must be strictly positive")
    sigma = np.sqrt(sigma2 + eps)
    g_tilde = gamma / sigma
    b_tilde = beta - g_tilde * mu
    b_prime = b + w @ b_tilde
    w_prime = w * g_tilde[None, :]
    if not (np.all(np.isfinite(w_prime)) and np.all(np.isfinite(b_prime))):
        raise ValueError("fusion produced non-finite parameters")
    return FusedAffinePair(weight_prime=w_prime, bias_prime=b_prime)


def verify_fusion(unfused: Callable, fused: Callable, inputs: Iterable, tol: float = 1e-9):
    """Worst elementwise discrepancy between two frozen models; (diff, passed)."""
    worst = 0.0
    for x in inputs:
        a = np.asarray(unfused(x))
        b = np.asarray(fused(x))
        if a.shape != b.shape:
            raise ValueError(f"model outputs differ in shape: {a.shape} vs {b.shape}")
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst, worst <= tol
