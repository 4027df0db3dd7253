"""Adaptive outlier filtration over windows of second-moment statistics.

A window is a newest-first sequence of per-channel statistics. The test
compares the AM-GM gap of the current window against ``M`` times the
variance of the square roots of the previous window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


GAP_ULPS = 8


@dataclass
class WindowSnapshot:
    values: np.ndarray  # shape (M, C), newest first

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"window must be (M, C) with M >= 1, got {v.shape}")
        if np.any(~(v > 0)):
            raise ValueError("window entries must be strictly positive")
        self.values = v

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def sqrt_values(self) -> np.ndarray:
        return np.sqrt(self.values)


@dataclass
class FiltrationDecision:
    triggered: bool
    per_channel_triggers: int
    lhs: np.ndarray
    rhs: np.ndarray
    mask: np.ndarray  # channels whose AM-GM gap exceeded the threshold


def window_operators(w: WindowSnapshot):
    """Arithmetic mean, geometric mean and population variance of square roots."""
    v = w.values
    # means relative to the channel maximum: constant windows come out exact
    top = v.max(axis=0)
    r = v / top
    am = top * r.mean(axis=0)
    gm = top * np.exp(np.log(r).mean(axis=0))
    var_sqrt = np.var(np.sqrt(v), axis=0)
    return am, gm, var_sqrt


def am_gm_gap(w: WindowSnapshot) -> np.ndarray:
    """E(w) - GM(w), exactly zero for constant windows."""
    v = w.values
    top = v.max(axis=0)
    r = v / top
    return top * (r.mean(axis=0) - np.exp(np.log(r).mean(axis=0)))


def geometric_mean(values: Sequence[np.ndarray]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    top = v.max(axis=0)
    with np.errstate(divide="ignore"):
        # an all-zero channel has geometric mean 0
        return top * np.exp(np.log(v / np.where(top > 0, top, 1.0)).mean(axis=0))


def detect_outlier(current: WindowSnapshot, previous: WindowSnapshot, m: int) -> FiltrationDecision:
    if current.m != m or previous.m != m:
        raise ValueError(f"both windows must hold M={m} entries (got {current.m}, {previous.m})")
    if m < 2:
        raise ValueError("outlier detection requires M >= 2")
    if current.values.shape[1] != previous.values.shape[1]:
        raise ValueError("window channel counts differ")
    lhs = am_gm_gap(current)
    _, _, prev_var = window_operators(previous)
    rhs = m * prev_var
    # the gap is a difference of nearly equal numbers, only resolved to a few
    # ulps of the mean; below that it is rounding noise, not an outlier
    floor = GAP_ULPS * m * np.finfo(np.float64).eps * current.values.mean(axis=0)
    hits = lhs > rhs + floor
    n = int(np.count_nonzero(hits))
    return FiltrationDecision(triggered=n > 0, per_channel_triggers=n, lhs=lhs, rhs=rhs,
                              mask=hits)


def apply_filtration(decision: FiltrationDecision, state) -> None:
    """Passivate the newest recorded statistic in every flagged channel.

    The newest activation-window entry of a flagged channel becomes its
    current inference variance and one event is logged for the step. The
    matching gradient-window entries are overwritten in the backward pass,
    which is where those values exist.
    """
    if not decision.triggered:
        return
    if state.sigma2_window:
        newest = state.sigma2_window[0]
        newest[decision.mask] = state.run_sigma2[decision.mask]
    state.outlier_events.append((state.step, decision.per_channel_triggers))


@dataclass
class LemmaCheck:
    lam: float
    premise_holds: bool
    applicable: bool


def verify_lemma1(a_prev: Sequence[float], a_t: float, m: int | None = None) -> LemmaCheck:
    """Numerically evaluate the premise and conclusion of the outlier lemma.

    ``a_prev`` is the previous window (a_{t-1}, a_{t-2}, ...), newest first.
    The current window is ``(a_t, *a_prev[:m-1])``; the previous window used
    for the variance threshold is ``a_prev[:m]``. ``m`` defaults to
    ``len(a_prev)``.
    """
    prev = np.asarray(a_prev, dtype=np.float64)
    if m is None:
        m = prev.size
    if prev.size < m - 1 or m < 2:
        raise ValueError("need at least m-1 previous entries and m >= 2")
    if np.any(prev <= 0) or a_t <= 0:
        raise ValueError("entries must be positive")
    cur = np.concatenate([[a_t], prev[: m - 1]])
    prev_w = prev[:m]
    applicable = bool(np.all(prev_w < a_t))
    am = cur.mean()
    gm = float(np.exp(np.log(cur).mean()))
    lam = gm / a_t
    premise = applicable and bool(m * np.var(np.sqrt(prev_w)) < am - gm)
    return LemmaCheck(lam=lam, premise_holds=premise, applicable=applicable)


@dataclass
class CorollaryCheck:
    ratio: float
    chain_rule_grad: float
    estimated_grad: float
    premise_holds: bool


def verify_corollary(window: Sequence[float], outlier_input, gamma: float = 1.0,
                     epsilon: float = 0.0, seed: int = 0, h: float = 1e-6) -> CorollaryCheck:
    """Ratio of the chain-rule gradient w.r.t. the current statistic to the
    gradient w.r.t. the smoothed statistic, for a single channel.

    ``window`` is the previous full window (newest first, length M); the
    current statistic is the quadratic mean of ``outlier_input`` and the
    current window is ``(current, *window[:M-1])``. The chain-rule gradient
    is taken by central differences through the geometric mean with earlier
    entries held fixed; the estimated gradient is the analytic derivative of
    a fixed random linear loss with respect to the smoothed statistic.
    """
    prev = np.asarray(window, dtype=np.float64).reshape(-1)
    m = prev.size
    if m < 2:
        raise ValueError("window must hold at least 2 entries")
    earlier = prev[: m - 1]
    x = np.asarray(outlier_input, dtype=np.float64).reshape(-1)
    sigma2_t = float(np.mean(x * x))
    w = np.random.Generator(np.random.PCG64(seed)).standard_normal(x.size)

    def smoothed(s2):
        return float(np.exp((np.log(s2) + np.log(earlier).sum()) / m))

    def loss_of_hat(s2_hat):
        return float(np.sum(w * gamma * x / np.sqrt(s2_hat + epsilon)))

    s_hat = smoothed(sigma2_t)
    # L = sum(w * gamma * x * (s_hat + eps)^(-1/2))
    g_est = float(np.sum(w * gamma * x) * -0.5 * (s_hat + epsilon) ** -1.5)
    hh = h * sigma2_t
    g_true = (loss_of_hat(smoothed(sigma2_t + hh)) - loss_of_hat(smoothed(sigma2_t - hh))) / (2 * hh)
    premise = verify_lemma1(prev, sigma2_t).premise_holds
    return CorollaryCheck(ratio=g_true / g_est, chain_rule_grad=g_true,
                          estimated_grad=g_est, premise_holds=premise)
