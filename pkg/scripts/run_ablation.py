"""Softmax / learning-rate / distillation ablation with an ordering check.

Runs the 2x2x2 grid at the requested scale, then prints mean average
accuracy per cell and whether Comb < {Sep, Comb+LowLR} < Sep+LowLR and
KD > no-KD hold for every seed.

    python scripts/run_ablation.py results/ablation --scale desk
"""
import argparse
import itertools

import numpy as np

from classil.experiment import load_splits, run_experiment
from classil.recipes import expand
from classil.report import render_report

ROWS = ("comb", "sep", "comb-lowlr", "sep-lowlr")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("output_dir")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--seeds", nargs="*", type=int, default=[0, 1, 2])
    a = p.parse_args()

    configs = expand("ablation-fig4", a.scale, output_dir=a.output_dir, seeds=a.seeds)
    splits = load_splits(configs[0])
    acc = {}
    for cfg in configs:
        acc[cfg.name] = np.array([run_experiment(cfg, s, splits, keep_model=False).report.avg_acc for s in a.seeds])
        print(f"{cfg.name:16s} {np.round(acc[cfg.name], 2).tolist()}  mean {acc[cfg.name].mean():.2f}", flush=True)

    ok = True
    for kd in ("nokd", "kd"):
        for lo, hi in (("comb", "sep"), ("comb", "comb-lowlr"), ("sep", "sep-lowlr"), ("comb-lowlr", "sep-lowlr")):
            holds = bool(np.all(acc[f"{lo}-{kd}"] < acc[f"{hi}-{kd}"]))
            ok &= holds
            print(f"{lo} < {hi} ({kd}): {holds}")
    for row in ROWS:
        holds = bool(np.all(acc[f"{row}-kd"] > acc[f"{row}-nokd"]))
        ok &= holds
        print(f"KD > noKD ({row}): {holds}")
    print("ordering holds" if ok else "ordering violated")
    for path in render_report(a.output_dir).tables:
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
