"""Train the desk recipe (toy benchmark: CCIL plus the 8-run ablation grid) and render the report.

    python scripts/run_desk.py results/desk [--seeds 0 1 2] [--jobs 3]
"""
import argparse
import sys

from classil.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("output_dir")
    p.add_argument("--seeds", nargs="*", default=["0", "1", "2"])
    p.add_argument("--jobs", default="1")
    a = p.parse_args()
    sys.exit(main(["run", "--recipe", "desk", "--scale", "desk", "--output_dir", a.output_dir,
                   "--seeds", *a.seeds, "--jobs", a.jobs]))
