"""Command-line entry point: ``unorm {train,sweep,gradcheck,fuse,pnac,bench}``.

Every command reads a JSON config, writes CSV/JSON artifacts into ``--out``
(default ``$UNORM_OUT`` or ``./runs``) and drops the resolved config next to
them. Exit codes: 0 success, 2 config error, 3 divergence, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics
from .fuse import verify_fusion
from .harness.models import Model, ModelConfig, build_model
from .harness.tasks import SyntheticTask
from .harness.train import compare_fused, sweep, sweep_to_csv, train
from .numkernel import make_rng
from .state import NormLayerState, NormMethodSpec

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
STATES_VERSION = "unorm-states-v1"


class ConfigError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(text)
    return p


def _model_and_task(cfg: dict, seed: int):
    try:
        task = SyntheticTask.from_dict({"seed": seed, **cfg.get("task", {})})
        mdict = {"seed": seed, "channels": task.channels, "out_dim": task.output_dim,
                 **cfg.get("model", {})}
        model_cfg = ModelConfig.from_dict(mdict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if model_cfg.channels != task.channels:
        raise ConfigError("model.channels must equal task.channels")
    return model_cfg, task


def _resolved(cfg: dict, model_cfg: ModelConfig | None, task: SyntheticTask | None, **extra) -> str:
    d = dict(cfg)
    if model_cfg is not None:
        d["model"] = model_cfg.to_dict()
    if task is not None:
        d["task"] = task.to_dict()
    d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)


def states_to_json(model: Model) -> str:
    layers = {k: v.to_dict() for k, v in model.norms.items() if v is not None}
    return json.dumps({"version": STATES_VERSION, "method": model.spec.to_dict(), "layers": layers})


def load_states(path) -> dict:
    d = _read_json(path)
    if d.get("version") != STATES_VERSION:
        raise ConfigError(f"{path}: unsupported state file version {d.get('version')!r}")
    try:
        return {k: NormLayerState.from_dict(v) for k, v in d["layers"].items()}
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _read_json(args.config)
    model_cfg, task = _model_and_task(cfg, args.seed)
    steps = int(cfg.get("steps", 2000))
    lr = float(cfg.get("lr", 0.05))
    n_trace = cfg.get("trace_channels")
    channels = None
    if n_trace is not None:
        channels = sorted(make_rng(args.seed).choice(model_cfg.channels, int(n_trace), replace=False).tolist())
    model = build_model(model_cfg)
    report = train(model, task, steps, lr, trace_channels=channels)
    out = Path(args.out)
    _write(out, "train_report.csv", report.to_csv())
    _write(out, "stats_trace.csv", report.trace.to_csv())
    _write(out, "final_state.json", states_to_json(model))
    _write(out, "model.json", json.dumps(model.to_dict()))
    _write(out, "outlier_events.csv", diagnostics.events_to_csv(report.outlier_events))
    _write(out, "resolved_config.json",
           _resolved(cfg, model_cfg, task, steps=steps, lr=lr, seed=args.seed, trace_channels=channels))
    if report.diverged:
        print(f"training diverged at step {len(report.losses) - 1}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"final loss {np.mean(report.losses[-20:]):.6g}  eval {report.final_eval:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _read_json(args.config)
    model_cfg, task = _model_and_task(cfg, args.seed)
    axis = cfg.get("axis", "window_m")
    try:
        rows = sweep(axis, model_cfg, task, int(cfg.get("steps", 2000)), float(cfg.get("lr", 0.05)),
                     values=cfg.get("values"), jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    _write(out, "sweep.csv", sweep_to_csv(rows))
    _write(out, "resolved_config.json", _resolved(cfg, model_cfg, task, seed=args.seed, axis=axis))
    return EXIT_DIVERGED if any(r.report.diverged for r in rows) else EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    try:
        spec = NormMethodSpec.from_dict({"method": "bn", **cfg.get("norm", {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not spec.offline:
        raise ConfigError("gradcheck covers the offline methods (bn, mabn, pnstar, un)")
    history = int(cfg.get("history", 0))
    trials = int(cfg.get("trials", 20))
    tol = float(cfg.get("tol", 1e-5))
    rows, cols = int(cfg.get("rows", 8)), int(cfg.get("channels", 4))
    rep = diagnostics.gradcheck(
        lambda s: diagnostics.random_layer(spec, s, rows, cols, history), spec,
        trials=trials, tol=tol, seed=args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "trials", "exact_max_rel", "exact_passed", "formula_max_abs", "formula_passed",
                "affine_max_rel", "affine_passed", "passed"])
    w.writerow([rep.method, rep.trials, rep.exact_max_rel, rep.exact_passed, rep.formula_max_abs,
                rep.formula_passed, rep.affine_max_rel, rep.affine_passed, rep.passed])
    out = Path(args.out)
    _write(out, "gradcheck.csv", buf.getvalue())
    _write(out, "resolved_config.json", _resolved(cfg, None, None, norm=spec.to_dict(),
                                                  history=history, trials=trials, tol=tol,
                                                  seed=args.seed))
    print(f"gradcheck {spec.method}: {'pass' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_fuse(args) -> int:
    model_d = _read_json(args.model)
    try:
        model = Model.from_dict(model_d)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{args.model}: {exc}") from exc
    if not model.spec.offline:
        print(f"online method {model.spec.method!r} not fusable", file=sys.stderr)
        return EXIT_CONFIG
    states = load_states(args.state)
    if set(states) != set(model.norms):
        raise ConfigError("state file layers do not match the model's norm sites")
    model.norms = states
    try:
        fused = model.fuse()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rng = make_rng(args.seed)
    xs = [rng.uniform(-10, 10, (4, 8, model.cfg.channels)) for _ in range(20)]
    diff, ok = verify_fusion(model.predict, fused.predict, xs, tol=1e-9)
    Path(args.out_path).parent.mkdir(parents=True, exist_ok=True)
    fused.save(args.out_path)
    print(f"fused model written to {args.out_path}; max |diff| = {diff:.3e}")
    if not ok:
        print("fusion verification failed", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _synthetic_trace(spec: dict, seed: int) -> diagnostics.StatsTrace:
    rng = make_rng(seed)
    steps, c = int(spec.get("steps", 150)), int(spec.get("channels", 256))
    dist = spec.get("distribution", "gaussian")
    if dist == "gaussian":
        vals = rng.normal(1.0, 0.1, (steps, c))
    elif dist == "lognormal":
        vals = rng.lognormal(0.0, float(spec.get("sigma_log", 2.0)), (steps, c))
    else:
        raise ConfigError(f"unknown synthetic distribution {dist!r}")
    tr = diagnostics.StatsTrace()
    for t in range(steps):
        tr.record(t, "synthetic", vals[t], vals[t], vals[t], vals[t], np.zeros(c, bool))
    return tr


def cmd_pnac(args) -> int:
    cfg = _read_json(args.config)
    if "trace" in cfg:
        try:
            trace = diagnostics.StatsTrace.load(cfg["trace"])
        except FileNotFoundError as exc:
            raise ConfigError(f"no such trace: {cfg['trace']}") from exc
    elif "synthetic" in cfg:
        trace = _synthetic_trace(cfg["synthetic"], args.seed)
    else:
        raise ConfigError("pnac config needs 'trace' or 'synthetic'")
    window = int(cfg.get("window", 150))
    which = cfg.get("which", "sigma2")
    kinds = ("sigma2", "grad") if which == "both" else (which,)
    reports = []
    try:
        for k in kinds:
            reports += diagnostics.pnac_windows(trace, window, k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    _write(out, "pnac.csv", diagnostics.pnac_to_csv(reports))
    _write(out, "outlier_accumulation.csv",
           diagnostics.accumulation_to_csv(diagnostics.outlier_accumulation(trace)))
    _write(out, "resolved_config.json", _resolved(cfg, None, None, window=window, which=which,
                                                  seed=args.seed))
    for r in reports:
        print(f"{r.layer} [{r.window_start},{r.window_end}) {r.which}: PNAC {r.pnac_percent:.1f}%")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _read_json(args.config)
    if "model_path" in cfg:
        try:
            model = Model.from_dict(_read_json(cfg["model_path"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        task = SyntheticTask.from_dict({"seed": args.seed, "channels": model.cfg.channels,
                                        "out_dim": model.cfg.out_dim, **cfg.get("task", {})})
    else:
        model_cfg, task = _model_and_task(cfg, args.seed)
        model = build_model(model_cfg)
        train(model, task, int(cfg.get("steps", 200)), float(cfg.get("lr", 0.05)), record_trace=False)
    if not model.spec.offline:
        raise ConfigError(f"online method {model.spec.method!r} cannot be benchmarked fused")
    cmp = compare_fused(model, task, int(cfg.get("batches", 1000)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "throughput_items_per_s", "divisions_per_item", "sqrts_per_item", "seconds"])
    for name, r in (("unfused", cmp.unfused), ("fused", cmp.fused)):
        w.writerow([name, f"{r.throughput:.1f}", r.divisions_per_item, r.sqrts_per_item, f"{r.seconds:.4f}"])
    w.writerow(["ratio", f"{cmp.ratio:.4f}", "", "", ""])
    w.writerow(["max_abs_diff", repr(cmp.max_abs_diff), "", "", ""])
    out = Path(args.out)
    _write(out, "bench.csv", buf.getvalue())
    _write(out, "resolved_config.json", _resolved(cfg, model.cfg, task, seed=args.seed))
    print(f"fused/unfused throughput ratio {cmp.ratio:.3f}; max |diff| {cmp.max_abs_diff:.2e}")
    return EXIT_OK if cmp.max_abs_diff <= 1e-9 else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unorm", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=os.environ.get("UNORM_OUT", "runs"))
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("sweep", cmd_sweep), ("pnac", cmd_pnac),
                     ("bench", cmd_bench)):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("gradcheck")
    sp.add_argument("config", nargs="?")
    sp.set_defaults(func=cmd_gradcheck)
    sp = sub.add_parser("fuse")
    sp.add_argument("state", help="final_state.json from a training run")
    sp.add_argument("model", help="model.json from a training run")
    sp.add_argument("out_path", help="where to write the fused model")
    sp.set_defaults(func=cmd_fuse)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
