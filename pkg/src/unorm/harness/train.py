"""Plain-SGD training loop, hyperparameter sweeps and the fusion benchmark."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .. import normcore
from ..diagnostics import StatsTrace
from ..fuse import verify_fusion
from ..numkernel import finite_difference_gradient, relative_error
from .models import Model, ModelConfig, build_model
from .tasks import SyntheticTask

REPORT_COLUMNS = ("step", "loss", "grad_norm", "wall_seconds")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    diverged: bool = False
    final_eval: float = float("nan")
    trace: Optional[StatsTrace] = None
    outlier_events: dict = field(default_factory=dict)

    @property
    def max_grad_norm(self) -> float:
        return float(np.max(self.grad_norms)) if self.grad_norms else 0.0

    def spike_ratio(self, trail: int = 20) -> float:
        """Largest gradient norm relative to the median of the preceding
        ``trail`` steps; infinite for a diverged run. The raw maximum is
        dominated by the first steps and says nothing about spikes."""
        if self.diverged:
            return float("inf")
        g = np.asarray(self.grad_norms, dtype=np.float64)
        if g.size <= trail:
            return 1.0
        return float(max(g[t] / np.median(g[t - trail:t]) for t in range(trail, g.size)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for i, (l, g, s) in enumerate(zip(self.losses, self.grad_norms, self.step_seconds)):
            w.writerow([i, repr(float(l)), repr(float(g)), f"{s:.6f}"])
        return buf.getvalue()


def _global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def evaluate(model: Model, task: SyntheticTask, batches: int = 4) -> float:
    losses = []
    for k in range(batches):
        x, y = task.batch_at(k, eval_batch=True)
        losses.append(task.loss(model.predict(x), y)[0])
    return float(np.mean(losses))


def train(model: Model, task: SyntheticTask, steps: int, lr: float,
          record_trace: bool = True, trace_channels: Optional[Sequence[int]] = None) -> TrainReport:
    """Train in place with plain SGD (no momentum). Divergence (any non-finite
    loss or gradient) stops training and sets ``diverged``; it never raises."""
    report = TrainReport(trace=StatsTrace(trace_channels) if record_trace else None)
    tracing = record_trace and model.spec.offline
    for step in range(steps):
        t0 = time.perf_counter()
        x, y = task.batch_at(step)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                out = model.forward(x, train=True)
                loss, dout = task.loss(out, y)
                grads, _ = model.backward(dout, report.trace if tracing else None)
                gnorm = _global_norm(grads)
            except (ValueError, FloatingPointError):
                # non-finite activations reach a norm layer's input validation
                loss, gnorm = float("nan"), float("nan")
        report.losses.append(loss)
        report.grad_norms.append(gnorm)
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            report.diverged = True
            report.step_seconds.append(time.perf_counter() - t0)
            break
        model.apply_sgd(grads, lr)
        report.step_seconds.append(time.perf_counter() - t0)
    if model.norms:
        report.outlier_events = {k: list(v.outlier_events) for k, v in model.norms.items()
                                 if v is not None and v.outlier_events}
    if not report.diverged:
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                report.final_eval = evaluate(model, task)
            except ValueError:
                report.final_eval = float("nan")
    return report


def _run_point(args):
    cfg, task, steps, lr = args
    model = build_model(cfg)
    rep = train(model, task, steps, lr, record_trace=False)
    return rep


SWEEP_AXES = {"window_m": (2, 4, 6, 8, 10), "alpha": (0.6, 0.7, 0.8, 0.9)}
SWEEP_COLUMNS = ("axis", "value", "final_loss", "final_eval", "max_grad_norm", "diverged")


@dataclass
class SweepRow:
    axis: str
    value: float
    report: TrainReport

    @property
    def final_loss(self) -> float:
        return float(np.mean(self.report.losses[-20:])) if self.report.losses else float("nan")


def sweep(axis: str, base: ModelConfig, task: SyntheticTask, steps: int, lr: float,
          values: Optional[Sequence] = None, jobs: int = 1) -> list:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {tuple(SWEEP_AXES)}")
    values = SWEEP_AXES[axis] if values is None else values
    cfgs = [replace(base, norm=replace(base.norm, **{axis: v})) for v in values]
    work = [(c, task, steps, lr) for c in cfgs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_run_point, work))
    else:
        reports = [_run_point(w) for w in work]
    return [SweepRow(axis, v, r) for v, r in zip(values, reports)]


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.axis, r.value, repr(r.final_loss), repr(r.report.final_eval),
                    repr(r.report.max_grad_norm), int(r.report.diverged)])
    return buf.getvalue()


@dataclass
class BenchResult:
    throughput: float  # items (token rows) per second
    divisions_per_item: float
    sqrts_per_item: float
    seconds: float


def bench_inference(model: Model, task: SyntheticTask, batches: int = 1000,
                    warmup: int = 20) -> BenchResult:
    """Wall-clock throughput of ``model.predict`` plus normalization op counts."""
    xs = [task.batch_at(k, eval_batch=True)[0] for k in range(min(batches, 16))]
    for k in range(warmup):
        model.predict(xs[k % len(xs)])
    normcore.OP_COUNTS.clear()
    items = 0
    t0 = time.perf_counter()
    for k in range(batches):
        x = xs[k % len(xs)]
        model.predict(x)
        items += x.shape[0] * x.shape[1]
    dt = time.perf_counter() - t0
    return BenchResult(throughput=items / dt,
                       divisions_per_item=normcore.OP_COUNTS["div"] / items,
                       sqrts_per_item=normcore.OP_COUNTS["sqrt"] / items,
                       seconds=dt)


@dataclass
class BenchComparison:
    unfused: BenchResult
    fused: BenchResult
    max_abs_diff: float

    @property
    def ratio(self) -> float:
        return self.fused.throughput / self.unfused.throughput


def compare_fused(model: Model, task: SyntheticTask, batches: int = 1000,
                  rounds: int = 3) -> BenchComparison:
    """Benchmark unfused vs fused inference, alternating rounds and keeping
    each path's best round; checks outputs agree on every benchmark input."""
    fused = model.fuse()
    xs = [task.batch_at(k, eval_batch=True)[0] for k in range(16)]
    diff, _ = verify_fusion(model.predict, fused.predict, xs)
    best_u = best_f = None
    per_round = max(1, batches // rounds)
    for _ in range(rounds):
        u = bench_inference(model, task, per_round)
        f = bench_inference(fused, task, per_round)
        best_u = u if best_u is None or u.throughput > best_u.throughput else best_u
        best_f = f if best_f is None or f.throughput > best_f.throughput else best_f
    return BenchComparison(unfused=best_u, fused=best_f, max_abs_diff=diff)


def model_gradcheck(model: Model, task: SyntheticTask, step: int = 0, h: float = 1e-5) -> dict:
    """Relative error of the full model's backward pass against central
    differences of the task loss, for parameters and inputs.

    Every loss evaluation runs on a copy, so the norm states see the same
    history as the analytic pass. The error is global over each group:
    some parameters have exactly zero true gradient (a bias right before a
    mean-subtracting norm), so per-parameter ratios are meaningless there.
    """
    x, y = task.batch_at(step)

    def loss_with(params=None, xx=x):
        m = model.copy()
        if params is not None:
            m.params = params
        return task.loss(m.forward(xx, train=True), y)[0]

    m = model.copy()
    _, dout = task.loss(m.forward(x, train=True), y)
    grads, dx = m.backward(dout)
    names = sorted(model.params)
    analytic = np.concatenate([grads[k].ravel() for k in names])
    numeric = []
    for k in names:
        def f(v, k=k):
            p = dict(model.params)
            p[k] = v
            return loss_with(p)
        numeric.append(finite_difference_gradient(f, model.params[k], h).ravel())
    fd_x = finite_difference_gradient(lambda xx: loss_with(None, xx), x, h)
    return {"params": relative_error(analytic, np.concatenate(numeric)),
            "inputs": relative_error(dx, fd_x)}
