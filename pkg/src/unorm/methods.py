"""Averaging strategies for the offline norms, plus the LN reference.

Each strategy decides two things:

* forward: which statistics normalize the current batch (mu_hat, sigma2_hat),
  given the current batch statistic and the layer's recorded history;
* backward: the gradient statistics (psi_mu, psi_sigma2) that replace the
  exact per-batch terms in ``dx = (dz - psi_mu - z * psi_sigma2) / sqrt(s + eps)``.

Strategies mutate the layer state (windows, EMAs); they are driven by
:mod:`unorm.normcore` in strict step order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .outlier import WindowSnapshot, apply_filtration, detect_outlier, geometric_mean
from .state import ForwardCache, NormLayerState, NormMethodSpec


@dataclass
class ForwardStats:
    mu_hat: np.ndarray
    sigma2_hat: np.ndarray
    sigma2_t: np.ndarray
    warmup: bool = False
    drop_mask: Optional[np.ndarray] = None
    per_channel_triggers: int = 0

    @property
    def drop(self) -> bool:
        return self.drop_mask is not None and bool(self.drop_mask.any())


class AveragingStrategy:
    name = ""
    centered = False  # subtract a first-moment statistic

    def batch_statistic(self, x: np.ndarray) -> np.ndarray:
        return np.mean(x * x, axis=0)

    def forward(self, x, state: NormLayerState, spec: NormMethodSpec) -> ForwardStats:
        raise NotImplementedError

    def backward(self, dz, cache: ForwardCache, state: NormLayerState, spec: NormMethodSpec):
        """Return (psi_mu, psi_sigma2, g_sigma2) and update gradient history."""
        raise NotImplementedError

    def _in_warmup(self, state, spec) -> bool:
        return state.step < spec.warmup_steps


class BatchNormStrategy(AveragingStrategy):
    """Current-iteration mean and variance; exact gradients."""

    name = "bn"
    centered = True

    def batch_statistic(self, x):
        mu = x.mean(axis=0)
        d = x - mu
        return mu, np.mean(d * d, axis=0)

    def forward(self, x, state, spec):
        mu, var = self.batch_statistic(x)
        state.push_window(state.sigma2_window, var, spec.window_m)
        return ForwardStats(mu_hat=mu, sigma2_hat=var, sigma2_t=var)

    def backward(self, dz, cache, state, spec):
        g_mu = dz.mean(axis=0)
        g = np.mean(dz * cache.z, axis=0)
        state.push_window(state.grad_window, g, spec.window_m)
        state.psi = g.copy()
        return g_mu, g, g


class MABNStrategy(AveragingStrategy):
    """Quadratic mean; EMA forward statistic, simple-moving-average gradient."""

    name = "mabn"

    def _ema_forward(self, x, state, spec) -> ForwardStats:
        s = self.batch_statistic(x)
        if state.sigma2_ema is None:
            state.sigma2_ema = s.copy()
        else:
            state.sigma2_ema = spec.alpha * state.sigma2_ema + (1 - spec.alpha) * s
        state.push_window(state.sigma2_window, s, spec.window_m)
        warm = self._in_warmup(state, spec)
        hat = s if warm else state.sigma2_ema.copy()
        return ForwardStats(mu_hat=np.zeros_like(s), sigma2_hat=hat, sigma2_t=s, warmup=warm)

    def forward(self, x, state, spec):
        return self._ema_forward(x, state, spec)

    def backward(self, dz, cache, state, spec):
        g = np.mean(dz * cache.z, axis=0)
        state.push_window(state.grad_window, g, spec.window_m)
        sma = np.mean(state.grad_window, axis=0)
        state.psi = sma
        psi = g if cache.warmup else sma
        return np.zeros_like(g), psi, g


class PNStarStrategy(MABNStrategy):
    """Quadratic mean; EMA in both forward statistic and gradient statistic."""

    name = "pnstar"

    def backward(self, dz, cache, state, spec):
        g = np.mean(dz * cache.z, axis=0)
        state.push_window(state.grad_window, g, spec.window_m)
        state.psi = spec.alpha * state.psi + (1 - spec.alpha) * g
        psi = g if cache.warmup else state.psi.copy()
        return np.zeros_like(g), psi, g


class UnifiedStrategy(AveragingStrategy):
    """Geometric mean over the activation window; EMA of the windowed
    arithmetic mean of gradients; optional outlier filtration."""

    name = "un"

    def forward(self, x, state, spec):
        s = self.batch_statistic(x)
        m = spec.window_m
        previous = list(state.raw_sigma2_window)
        state.push_window(state.sigma2_window, s, m)
        state.push_window(state.raw_sigma2_window, s, m)
        warm = self._in_warmup(state, spec)
        zeros = np.zeros_like(s)
        if warm:
            return ForwardStats(mu_hat=zeros, sigma2_hat=s, sigma2_t=s, warmup=True)
        if spec.filtration and filtration_active(state, spec) and len(previous) == m:
            # the test reads observed statistics; testing the passivated
            # window would see near-zero spread after a few drops and fire
            # on every later step
            decision = detect_outlier(WindowSnapshot(state.raw_sigma2_window),
                                      WindowSnapshot(previous), m)
            if decision.triggered:
                hat = geometric_mean(state.sigma2_window)
                hat[decision.mask] = s[decision.mask]
                apply_filtration(decision, state)
                return ForwardStats(mu_hat=zeros, sigma2_hat=hat, sigma2_t=s,
                                    drop_mask=decision.mask.copy(),
                                    per_channel_triggers=decision.per_channel_triggers)
        hat = geometric_mean(state.sigma2_window)
        return ForwardStats(mu_hat=zeros, sigma2_hat=hat, sigma2_t=s)

    def backward(self, dz, cache, state, spec):
        g = np.mean(dz * cache.z, axis=0)
        psi_prev = state.psi
        state.push_window(state.grad_window, g, spec.window_m)
        mask = cache.drop_mask
        if mask is not None and mask.any():
            # passivate: flagged channels keep their previous estimate and
            # their outlier gradient never enters the history
            state.grad_window[0][mask] = psi_prev[mask]
        psi = spec.alpha * psi_prev + (1 - spec.alpha) * np.mean(state.grad_window, axis=0)
        applied = g.copy() if cache.warmup else psi.copy()
        if mask is not None and mask.any():
            psi[mask] = psi_prev[mask]
            applied[mask] = g[mask]
        state.psi = psi
        return np.zeros_like(g), applied, g


def filtration_active(state: NormLayerState, spec: NormMethodSpec) -> bool:
    """Filtration needs two full windows and is inert for M steps after warmup."""
    return state.step >= spec.warmup_steps + spec.window_m


_STRATEGIES = {
    "bn": BatchNormStrategy,
    "mabn": MABNStrategy,
    "pnstar": PNStarStrategy,
    "un": UnifiedStrategy,
}


def make_method(spec: NormMethodSpec) -> AveragingStrategy:
    try:
        return _STRATEGIES[spec.method]()
    except KeyError:
        if spec.method == "ln":
            raise ValueError("'ln' is an online method with no averaging strategy") from None
        raise ValueError(f"unknown method tag {spec.method!r}") from None


def ln_forward(x, gamma, beta, eps: float = 1e-5):
    """Per-row LayerNorm. Returns (y, cache) with cache = (z, inv_std)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] < 2 and eps == 0:
        raise ValueError("LayerNorm over fewer than 2 channels with eps=0 is undefined")
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    z = d * inv_std
    return gamma * z + beta, (z, inv_std)


def ln_backward(grad_y, cache, gamma):
    z, inv_std = cache
    dz = grad_y * gamma
    dx = inv_std * (dz - dz.mean(axis=1, keepdims=True) - z * np.mean(dz * z, axis=1, keepdims=True))
    return dx, np.sum(grad_y * z, axis=0), np.sum(grad_y, axis=0)


def ln_forward_backward(x, gamma, beta, grad_y, eps: float = 1e-5):
    y, cache = ln_forward(x, gamma, beta, eps)
    dx, dgamma, dbeta = ln_backward(np.asarray(grad_y, dtype=np.float64), cache, gamma)
    return y, dx, dgamma, dbeta
