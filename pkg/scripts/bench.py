"""Fused vs unfused inference throughput for every offline method."""

import argparse

from unorm.harness import ModelConfig, SyntheticTask, build_model, compare_fused, train
from unorm.state import NormMethodSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batches", type=int, default=1000)
    ap.add_argument("--model", choices=["mlp", "mini_transformer"], default="mini_transformer")
    ap.add_argument("--depth", type=int, default=2)
    args = ap.parse_args()

    task = SyntheticTask()
    print("method,unfused_items_per_s,fused_items_per_s,ratio,unfused_div_per_item,"
          "fused_div_per_item,max_abs_diff")
    for method in ("bn", "mabn", "pnstar", "un"):
        cfg = ModelConfig(args.model, depth=args.depth,
                          norm=NormMethodSpec(method, warmup_steps=20))
        model = build_model(cfg)
        train(model, task, 50, 0.05, record_trace=False)
        c = compare_fused(model, task, args.batches)
        print(f"{method},{c.unfused.throughput:.0f},{c.fused.throughput:.0f},{c.ratio:.3f},"
              f"{c.unfused.divisions_per_item:g},{c.fused.divisions_per_item:g},"
              f"{c.max_abs_diff:.2e}")


if __name__ == "__main__":
    main()
