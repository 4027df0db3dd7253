"""Generic offline normalization: training forward/backward with pluggable
averaging strategies, and the frozen inference path.

Training normalizes with ``z = (x - mu_hat) / sqrt(sigma2_hat + eps)`` and
``y = gamma * z + beta``. The backward pass uses

    dx = (dz - psi_mu - z * psi_sigma2) / sqrt(sigma2_hat + eps),  dz = gamma * dy

where the psi terms come from the method's strategy. Inference uses the
running statistics, which are blended with momentum ``alpha`` from the
statistics actually applied in each training step.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .methods import make_method
from .numkernel import as_matrix
from .state import ForwardCache, NormLayerState, NormMethodSpec

# divisions / square roots executed by normalization at inference
OP_COUNTS: Counter = Counter()


def _check_channels(x: np.ndarray, state: NormLayerState) -> None:
    if x.shape[1] != state.channels:
        raise ValueError(f"input has {x.shape[1]} channels, layer has {state.channels}")


def inference_forward(x, state: NormLayerState, spec: NormMethodSpec) -> np.ndarray:
    if not spec.offline:
        raise ValueError(f"{spec.method!r} is an online method; it has no frozen inference path")
    x = as_matrix(x)
    _check_channels(x, state)
    if not (np.all(np.isfinite(state.run_mu)) and np.all(np.isfinite(state.run_sigma2))):
        raise ValueError("non-finite inference statistics")
    denom = np.sqrt(state.run_sigma2 + spec.epsilon)
    OP_COUNTS["sqrt"] += denom.size
    OP_COUNTS["div"] += x.size
    return state.gamma * ((x - state.run_mu) / denom) + state.beta


def train_forward(x, state: NormLayerState, spec: NormMethodSpec):
    x = as_matrix(x)
    _check_channels(x, state)
    strategy = make_method(spec)
    stats = strategy.forward(x, state, spec)
    denom2 = stats.sigma2_hat + spec.epsilon
    if np.any(denom2 <= 0):
        raise ValueError("zero normalizing statistic with epsilon=0 (all-zero input channel)")
    z = (x - stats.mu_hat) / np.sqrt(denom2)
    y = state.gamma * z + state.beta
    a = spec.alpha
    state.run_mu = a * state.run_mu + (1 - a) * stats.mu_hat
    blended = a * state.run_sigma2 + (1 - a) * stats.sigma2_hat
    if stats.drop:
        # filtered channels record the inference statistic itself, which
        # leaves their running blend unchanged
        blended[stats.drop_mask] = state.run_sigma2[stats.drop_mask]
    state.run_sigma2 = blended
    cache = ForwardCache(
        x=x, z=z, sigma2_hat=stats.sigma2_hat, mu_hat=stats.mu_hat,
        sigma2_t=stats.sigma2_t, step=state.step, warmup=stats.warmup,
        drop_mask=stats.drop_mask, per_channel_triggers=stats.per_channel_triggers,
    )
    state.step += 1
    return y, cache


def apply_backward(dz, z, sigma2_hat, eps, psi_mu, psi_sigma2):
    return (dz - psi_mu - z * psi_sigma2) / np.sqrt(sigma2_hat + eps)


def train_backward(grad_y, cache: ForwardCache, state: NormLayerState, spec: NormMethodSpec):
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != cache.z.shape:
        raise ValueError(f"grad_y shape {grad_y.shape} does not match forward output {cache.z.shape}")
    if cache.step != state.step - 1:
        raise ValueError(f"cache from step {cache.step} used at step {state.step - 1}")
    if cache.g_sigma2 is not None:
        raise ValueError("cache already consumed by a backward pass")
    strategy = make_method(spec)
    dz = state.gamma * grad_y
    psi_mu, psi_sigma2, g = strategy.backward(dz, cache, state, spec)
    cache.g_sigma2, cache.psi_mu, cache.psi_sigma2 = g, psi_mu, psi_sigma2
    grad_x = apply_backward(dz, cache.z, cache.sigma2_hat, spec.epsilon, psi_mu, psi_sigma2)
    grad_gamma = np.sum(grad_y * cache.z, axis=0)
    grad_beta = np.sum(grad_y, axis=0)
    return grad_x, grad_gamma, grad_beta


def freeze_statistics(state: NormLayerState):
    """Running (mu, sigma2) for inference or fusion."""
    if state.step < 1:
        raise ValueError("no training steps taken; statistics are not estimated")
    return state.run_mu.copy(), state.run_sigma2.copy()


def export_frozen(state: NormLayerState, spec: NormMethodSpec) -> dict:
    mu, sigma2 = freeze_statistics(state)
    return {
        "version": "unorm-frozen-v1",
        "method": spec.method,
        "epsilon": spec.epsilon,
        "gamma": state.gamma.tolist(),
        "beta": state.beta.tolist(),
        "mu": mu.tolist(),
        "sigma2": sigma2.tolist(),
    }
