"""Training-trace analysis: normality testing, PNAC, outlier accounting and
gradient checks for the norm layers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import normcore
from .numkernel import finite_difference_gradient, make_rng, relative_error
from .state import NormLayerState, NormMethodSpec

TRACE_COLUMNS = ("step", "layer", "channel", "sigma2_t", "sigma2_hat", "g", "psi", "trigger")
PNAC_COLUMNS = ("layer", "window_start", "window_end", "which", "pnac")
MIN_NORMALITY_LEN = 20


# --------------------------------------------------------------------------
# D'Agostino-Pearson K^2
# --------------------------------------------------------------------------

def _skew_z(b1: np.ndarray, n: int) -> np.ndarray:
    # D'Agostino (1970) transformation of sample skewness
    y = b1 * np.sqrt((n + 1.0) * (n + 3) / (6.0 * (n - 2)))
    beta2 = (3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3)
             / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9)))
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    y = np.where(y == 0, 1.0, y)
    return delta * np.log(y / alpha + np.sqrt((y / alpha) ** 2 + 1.0))


def _kurt_z(b2: np.ndarray, n: int) -> np.ndarray:
    # Anscombe & Glynn (1983) transformation of sample kurtosis
    e = 3.0 * (n - 1) / (n + 1)
    var_b2 = 24.0 * n * (n - 2) * (n - 3) / ((n + 1.0) ** 2 * (n + 3) * (n + 5))
    x = (b2 - e) / np.sqrt(var_b2)
    sqrt_beta1 = (6.0 * (n * n - 5 * n + 2) / ((n + 7.0) * (n + 9))
                  * np.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2.0) * (n - 3))))
    a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + np.sqrt(1.0 + 4.0 / sqrt_beta1 ** 2))
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + x * np.sqrt(2.0 / (a - 4.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        term2 = np.sign(denom) * np.cbrt((1.0 - 2.0 / a) / np.abs(denom))
    term2 = np.where(denom == 0, np.inf * -1.0, term2)
    return (term1 - term2) / np.sqrt(2.0 / (9.0 * a))


def normality_pvalues(samples, axis: int = 0) -> np.ndarray:
    """Vectorized K^2 p-values along ``axis``; zero-variance slices give 0."""
    a = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, 0)
    n = a.shape[0]
    if n < MIN_NORMALITY_LEN:
        raise ValueError(f"normality test needs at least {MIN_NORMALITY_LEN} samples, got {n}")
    d = a - a.mean(axis=0)
    m2 = np.mean(d ** 2, axis=0)
    degenerate = m2 <= (np.finfo(float).eps * np.abs(a).max(axis=0)) ** 2
    safe_m2 = np.where(degenerate, 1.0, m2)
    b1 = np.mean(d ** 3, axis=0) / safe_m2 ** 1.5
    b2 = np.mean(d ** 4, axis=0) / safe_m2 ** 2
    k2 = _skew_z(b1, n) ** 2 + _kurt_z(b2, n) ** 2
    # chi-square with 2 dof: survival function exp(-k/2)
    p = np.exp(-0.5 * k2)
    return np.where(degenerate, 0.0, p)


def normality_test(sequence: Sequence[float]) -> float:
    seq = np.asarray(sequence, dtype=np.float64).reshape(-1)
    return float(normality_pvalues(seq))


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------

@dataclass
class _LayerTrace:
    steps: list = field(default_factory=list)
    sigma2_t: list = field(default_factory=list)
    sigma2_hat: list = field(default_factory=list)
    g: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    trigger: list = field(default_factory=list)


class StatsTrace:
    """Per-step, per-layer, per-channel record of normalization statistics.

    ``channels`` optionally restricts recording to a subset of channel ids.
    """

    def __init__(self, channels: Optional[Sequence[int]] = None):
        self.channels = None if channels is None else [int(c) for c in channels]
        self.layers: dict = {}

    def record(self, step, layer, sigma2_t, sigma2_hat, g, psi, trigger) -> None:
        lt = self.layers.setdefault(layer, _LayerTrace())
        if lt.steps and step <= lt.steps[-1]:
            raise ValueError(f"steps must increase per layer ({step} after {lt.steps[-1]})")
        sel = slice(None) if self.channels is None else self.channels
        c = np.asarray(sigma2_t).shape[0]
        trig = np.broadcast_to(np.asarray(trigger, dtype=bool), (c,))
        lt.steps.append(int(step))
        lt.sigma2_t.append(np.asarray(sigma2_t, dtype=np.float64)[sel].copy())
        lt.sigma2_hat.append(np.asarray(sigma2_hat, dtype=np.float64)[sel].copy())
        lt.g.append(np.asarray(g, dtype=np.float64)[sel].copy())
        lt.psi.append(np.asarray(psi, dtype=np.float64)[sel].copy())
        lt.trigger.append(np.array(trig)[sel].copy())

    def channel_ids(self, layer) -> list:
        n = len(self.layers[layer].sigma2_t[0])
        return list(range(n)) if self.channels is None else list(self.channels)

    def steps(self, layer) -> np.ndarray:
        return np.asarray(self.layers[layer].steps)

    def series(self, layer, which: str) -> np.ndarray:
        """(steps, channels) array for one statistic."""
        key = {"sigma2": "sigma2_t", "grad": "g"}.get(which, which)
        return np.asarray(getattr(self.layers[layer], key))

    def to_csv(self) -> str:
        buf = io.StringIO()
        chans = "all" if self.channels is None else " ".join(map(str, self.channels))
        buf.write(f"# unorm-trace-v1 channels={chans}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for layer, lt in self.layers.items():
            ids = self.channel_ids(layer)
            for i, step in enumerate(lt.steps):
                for j, ch in enumerate(ids):
                    w.writerow([step, layer, ch, repr(float(lt.sigma2_t[i][j])),
                                repr(float(lt.sigma2_hat[i][j])), repr(float(lt.g[i][j])),
                                repr(float(lt.psi[i][j])), int(lt.trigger[i][j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "StatsTrace":
        lines = text.splitlines()
        channels = None
        body = []
        for ln in lines:
            if ln.startswith("#"):
                for tok in ln[1:].split():
                    if tok.startswith("channels=") and tok != "channels=all":
                        channels = [int(c) for c in ln.split("channels=", 1)[1].split()]
                        break
            else:
                body.append(ln)
        reader = csv.DictReader(body)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {reader.fieldnames}")
        rows: dict = {}
        for r in reader:
            rows.setdefault(r["layer"], {}).setdefault(int(r["step"]), []).append(r)
        tr = cls(channels)
        tr.channels = None  # data already subset; store as-is
        for layer, by_step in rows.items():
            for step in sorted(by_step):
                rs = sorted(by_step[step], key=lambda r: int(r["channel"]))
                col = lambda k: np.array([float(r[k]) for r in rs])  # noqa: E731
                tr.record(step, layer, col("sigma2_t"), col("sigma2_hat"), col("g"),
                          col("psi"), np.array([bool(int(r["trigger"])) for r in rs]))
        tr.channels = channels
        return tr

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "StatsTrace":
        return cls.from_csv(Path(path).read_text())


def record_layer(trace: StatsTrace, layer, cache, state: NormLayerState) -> None:
    """Record one completed forward/backward step of a norm layer."""
    trigger = np.zeros(state.channels, dtype=bool)
    if cache.drop_mask is not None:
        trigger |= cache.drop_mask
    trace.record(cache.step, layer, cache.sigma2_t, cache.sigma2_hat, cache.g_sigma2,
                 cache.psi_sigma2, trigger)


# --------------------------------------------------------------------------
# PNAC
# --------------------------------------------------------------------------

@dataclass
class PnacReport:
    layer: str
    window_start: int
    window_end: int
    which: str
    pnac_percent: float
    sample_window_len: int


def pnac_of(values: np.ndarray) -> float:
    """Percent of columns of a (steps, channels) array with p > 0.05."""
    p = normality_pvalues(values, axis=0)
    return 100.0 * np.count_nonzero(p > 0.05) / values.shape[1]


def compute_pnac(trace: StatsTrace, layer, window: tuple, which: str = "sigma2") -> PnacReport:
    start, end = window
    steps = trace.steps(layer)
    mask = (steps >= start) & (steps < end)
    vals = trace.series(layer, which)[mask]
    if vals.shape[0] < MIN_NORMALITY_LEN:
        raise ValueError(f"window holds {vals.shape[0]} steps; need {MIN_NORMALITY_LEN}")
    return PnacReport(layer=str(layer), window_start=int(start), window_end=int(end), which=which,
                      pnac_percent=pnac_of(vals), sample_window_len=int(vals.shape[0]))


def pnac_windows(trace: StatsTrace, window_len: int = 150, which: str = "sigma2") -> list:
    """Non-overlapping PNAC windows over every layer."""
    out = []
    for layer in trace.layers:
        steps = trace.steps(layer)
        if steps.size == 0:
            continue
        start = int(steps[0])
        while start + window_len <= int(steps[-1]) + 1:
            out.append(compute_pnac(trace, layer, (start, start + window_len), which))
            start += window_len
    return out


def pnac_to_csv(reports: Sequence[PnacReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PNAC_COLUMNS)
    for r in reports:
        w.writerow([r.layer, r.window_start, r.window_end, r.which, repr(r.pnac_percent)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Outlier accounting
# --------------------------------------------------------------------------

def outlier_accumulation(trace: StatsTrace) -> dict:
    """layer -> (steps, cumulative count of steps on which filtration fired)."""
    out = {}
    for layer, lt in trace.layers.items():
        fired = np.array([bool(np.any(t)) for t in lt.trigger], dtype=np.int64)
        out[layer] = (np.asarray(lt.steps), np.cumsum(fired))
    return out


def accumulation_to_csv(acc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "layer", "accumulated"])
    for layer, (steps, counts) in acc.items():
        for s, c in zip(steps, counts):
            w.writerow([int(s), layer, int(c)])
    return buf.getvalue()


def events_to_csv(events: dict) -> str:
    """``events`` maps layer -> list of (step, per_channel_triggers)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "layer", "per_channel_triggers"])
    for layer, evs in events.items():
        for s, n in evs:
            w.writerow([int(s), layer, int(n)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Gradient checks
# --------------------------------------------------------------------------

def independent_backward(grad_y, x, gamma, mu_hat, sigma2_hat, eps, psi_mu, psi_sigma2):
    """Re-derive dL/dx from scratch given the psi terms (no shared code path)."""
    inv = 1.0 / np.sqrt(sigma2_hat + eps)
    z = (x - mu_hat) * inv
    dz = grad_y * gamma
    return dz * inv - psi_mu * inv - z * (psi_sigma2 * inv)


@dataclass
class GradcheckReport:
    method: str
    trials: int
    exact_max_rel: Optional[float]
    exact_passed: Optional[bool]
    formula_max_abs: float
    formula_passed: bool
    affine_max_rel: float
    affine_passed: bool

    @property
    def passed(self) -> bool:
        return (self.exact_passed in (None, True)) and self.formula_passed and self.affine_passed


def random_layer(spec: NormMethodSpec, seed: int, rows: int = 8, channels: int = 4,
                 history: int = 0):
    """A layer state with ``history`` training steps behind it, plus a fresh input.

    Returns (x, state). History inputs have per-step random scale so the
    windows and EMAs carry nontrivial values.
    """
    rng = make_rng(seed)
    state = NormLayerState.init(channels)
    state.gamma = rng.uniform(0.5, 1.5, channels)
    state.beta = rng.normal(0, 0.5, channels)
    for _ in range(history):
        xh = rng.normal(0.3, 1.0, (rows, channels)) * rng.uniform(0.5, 2.0)
        _, cache = normcore.train_forward(xh, state, spec)
        normcore.train_backward(rng.normal(size=(rows, channels)), cache, state, spec)
    x = rng.normal(0.3, 1.0, (rows, channels))
    return x, state


def gradcheck(layer_builder: Callable, spec: NormMethodSpec, trials: int = 20,
              tol: float = 1e-5, exact: Optional[bool] = None, formula_tol: float = 1e-10,
              backward: Callable = normcore.train_backward, seed: int = 0,
              h: float = 1e-5) -> GradcheckReport:
    """Check a norm layer's backward pass.

    ``layer_builder(seed) -> (x, state)``. Check (a), finite differences of a
    random linear loss through ``train_forward``, runs when ``exact`` (default:
    BN always, others only when the built state is still in warmup). Check (b)
    compares against :func:`independent_backward` using the psi values the backward
    pass reported. Affine-parameter gradients are always checked by finite
    differences.
    """
    exact_err, formula_err, affine_err = 0.0, 0.0, 0.0
    ran_exact = False
    for k in range(trials):
        x, state = layer_builder(seed + k)
        in_exact = exact
        if in_exact is None:
            in_exact = spec.method == "bn" or state.step < spec.warmup_steps
        w = make_rng(10_000 + seed + k).normal(size=x.shape)

        st = state.copy()
        y, cache = normcore.train_forward(x, st, spec)
        gx, gg, gb = backward(w, cache, st, spec)

        ref = independent_backward(w, x, state.gamma, cache.mu_hat, cache.sigma2_hat, spec.epsilon,
                              cache.psi_mu, cache.psi_sigma2)
        formula_err = max(formula_err, float(np.max(np.abs(gx - ref))))

        def loss_x(xx):
            return float(np.sum(w * normcore.train_forward(xx, state.copy(), spec)[0]))

        if in_exact:
            ran_exact = True
            exact_err = max(exact_err, relative_error(gx, finite_difference_gradient(loss_x, x, h)))

        def loss_affine(p):
            s = state.copy()
            s.gamma, s.beta = p[0].copy(), p[1].copy()
            return float(np.sum(w * normcore.train_forward(x, s, spec)[0]))

        p0 = np.stack([state.gamma, state.beta])
        fd = finite_difference_gradient(loss_affine, p0, h)
        affine_err = max(affine_err, relative_error(np.stack([gg, gb]), fd))
    return GradcheckReport(
        method=spec.method, trials=trials,
        exact_max_rel=exact_err if ran_exact else None,
        exact_passed=(exact_err <= tol) if ran_exact else None,
        formula_max_abs=formula_err, formula_passed=formula_err <= formula_tol,
        affine_max_rel=affine_err, affine_passed=affine_err <= 1e-6,
    )
