"""Window-size and momentum sweeps for UN on the benign regression task."""

import argparse
from pathlib import Path

from unorm.harness import ModelConfig, SyntheticTask, sweep, sweep_to_csv
from unorm.state import NormMethodSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sweeps")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--warmup", type=int, default=200)
    ap.add_argument("--no-filtration", action="store_true")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    norm = NormMethodSpec("un", warmup_steps=args.warmup, filtration=not args.no_filtration)
    base = ModelConfig("mlp", norm=norm)
    task = SyntheticTask()
    for axis in ("window_m", "alpha"):
        rows = sweep(axis, base, task, args.steps, args.lr, jobs=args.jobs)
        (out / f"sweep_{axis}.csv").write_text(sweep_to_csv(rows))
        for r in rows:
            print(f"{axis}={r.value:<5} final_loss={r.final_loss:.4f} "
                  f"eval={r.report.final_eval:.4f} diverged={r.report.diverged}")


if __name__ == "__main__":
    main()
