"""Statistic fluctuation analysis: PNAC per layer and window, plus the
accumulated count of filtration drops, for BN, MABN and UN runs."""

import argparse
from pathlib import Path

from unorm import diagnostics
from unorm.harness import ModelConfig, SyntheticTask, build_model, train
from unorm.state import NormMethodSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/fluctuation")
    ap.add_argument("--steps", type=int, default=1200)
    ap.add_argument("--window", type=int, default=150)
    ap.add_argument("--inject", type=int, default=0, help="outlier period (0: benign task)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inj = (args.inject, 1e3) if args.inject else None
    task = SyntheticTask("token_copy_classification", outlier_injection=inj)
    for name, norm in (("bn", NormMethodSpec("bn")),
                       ("mabn", NormMethodSpec("mabn", warmup_steps=100)),
                       ("un", NormMethodSpec("un", warmup_steps=100, filtration=True))):
        model = build_model(ModelConfig("mini_transformer", norm=norm, out_dim=task.output_dim))
        rep = train(model, task, args.steps, 0.05)
        rep.trace.save(out / f"trace_{name}.csv")
        reports = (diagnostics.pnac_windows(rep.trace, args.window, "sigma2")
                   + diagnostics.pnac_windows(rep.trace, args.window, "grad"))
        (out / f"pnac_{name}.csv").write_text(diagnostics.pnac_to_csv(reports))
        acc = diagnostics.outlier_accumulation(rep.trace)
        (out / f"accumulated_{name}.csv").write_text(diagnostics.accumulation_to_csv(acc))
        mean_pnac = {w: sum(r.pnac_percent for r in reports if r.which == w)
                     / max(1, sum(r.which == w for r in reports)) for w in ("sigma2", "grad")}
        total = {k: int(v[1][-1]) for k, v in acc.items()}
        print(f"{name}: diverged={rep.diverged} mean PNAC sigma2={mean_pnac['sigma2']:.1f} "
              f"grad={mean_pnac['grad']:.1f} drops={total}")


if __name__ == "__main__":
    main()
