"""Base-task overfitting study: one long base run, class-IL from each saved snapshot.

Prints SS-Acc, SS-NLL, forgetting and feature retention per snapshot epoch.
The desk scale uses the toy benchmark; `--scale paper` needs CIFAR-100.

    python scripts/run_overfit.py results/overfit --scale desk --seeds 0
"""
import argparse

import numpy as np

from classil.experiment import load_splits, run_experiment
from classil.recipes import expand


def main():
    p = argparse.ArgumentParser()
    p.add_argument("output_dir")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--seeds", nargs="*", type=int, default=[0])
    a = p.parse_args()

    configs = expand("overfit-sec52", a.scale, output_dir=a.output_dir, seeds=a.seeds)
    splits = load_splits(configs[0])
    cols = ("ss_acc", "ss_nll", "forgetting", "feature_retention")
    print("run".ljust(22) + "".join(c.rjust(19) for c in cols))
    for cfg in configs:  # the pretrain run comes first; later runs load its snapshots
        reports = [run_experiment(cfg, s, splits, keep_model=False).report for s in a.seeds]
        if cfg.stop_after_base:
            continue
        vals = [np.mean([getattr(r, c) for r in reports]) for c in cols]
        print(cfg.name.ljust(22) + "".join(f"{v:19.3f}" for v in vals), flush=True)


if __name__ == "__main__":
    main()
