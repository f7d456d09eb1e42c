"""Tables and plots derived purely from stored run artifacts."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import AccuracyMatrix, MetricsReport

log = logging.getLogger(__name__)

COLUMNS = ("avg_acc", "forgetting", "feature_retention", "ss_nll", "ss_acc", "ece", "weight_norm_old",
           "weight_norm_new")

# (w/o KD, w/ KD) run names of the ablation grid, keyed by row label
ABLATION_ROWS = {
    "Comb": ("comb-nokd", "comb-kd"),
    "Sep": ("sep-nokd", "sep-kd"),
    "Comb+LowLR": ("comb-lowlr-nokd", "comb-lowlr-kd"),
    "Sep+LowLR": ("sep-lowlr-nokd", "sep-lowlr-kd"),
}


@dataclass
class RunRecord:
    name: str
    seed: int
    path: Path
    report: MetricsReport | None
    matrix: AccuracyMatrix | None


@dataclass
class RenderResult:
    tables: list[Path] = field(default_factory=list)
    plots: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def collect_runs(results_dir) -> tuple[list[RunRecord], list[str]]:
    """Every run listed in ``index.json`` (or found on disk) with whatever artifacts it has."""
    root = Path(results_dir)
    warnings = []
    index = root / "index.json"
    if index.exists():
        entries = json.loads(index.read_text())["runs"]
    else:
        entries = [{"name": p.parent.parent.name, "seed": int(p.parent.name[4:]), "path": str(p.parent.relative_to(root))}
                   for p in sorted(root.glob("*/seed*/manifest.json"))]
    runs = []
    for e in entries:
        path = root / e["path"]
        report = matrix = None
        if (path / "metrics.json").exists():
            report = MetricsReport.from_dict(json.loads((path / "metrics.json").read_text()))
        else:
            warnings.append(f"{path}: no metrics.json (run incomplete?)")
        if (path / "accuracy_matrix.csv").exists():
            matrix = AccuracyMatrix.from_csv(path / "accuracy_matrix.csv")
        runs.append(RunRecord(e["name"], int(e["seed"]), path, report, matrix))
    return runs, warnings


def mean_std(values) -> tuple[float, float] | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return None
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def fmt(ms: tuple[float, float] | None, n: int, digits: int = 2) -> str:
    if ms is None:
        return "-"
    return f"{ms[0]:.{digits}f}" if n == 1 else f"{ms[0]:.{digits}f} ± {ms[1]:.{digits}f}"


def group(runs: list[RunRecord]) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = {}
    for r in runs:
        if r.report is not None:
            out.setdefault(r.name, []).append(r)
    return out


def summary_rows(groups: dict[str, list[RunRecord]]) -> list[dict]:
    rows = []
    for name, rs in groups.items():
        row = {"name": name, "seeds": len(rs)}
        for col in COLUMNS:
            row[col] = mean_std([getattr(r.report, col) for r in rs])
        rows.append(row)
    return rows


def write_summary(rows: list[dict], out: Path) -> list[Path]:
    md = ["| run | seeds | " + " | ".join(COLUMNS) + " |", "|" + "---|" * (len(COLUMNS) + 2)]
    for row in rows:
        md.append(f"| {row['name']} | {row['seeds']} | " + " | ".join(fmt(row[c], row["seeds"]) for c in COLUMNS) + " |")
    (out / "summary.md").write_text("\n".join(md) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "seeds"] + [f"{c}_{s}" for c in COLUMNS for s in ("mean", "std")])
        for row in rows:
            cells = []
            for c in COLUMNS:
                cells += ["", ""] if row[c] is None else [f"{row[c][0]:.6f}", f"{row[c][1]:.6f}"]
            w.writerow([row["name"], row["seeds"]] + cells)
    return [out / "summary.md", out / "summary.csv"]


def ablation_table(groups: dict[str, list[RunRecord]]) -> str | None:
    """Average accuracy of the four softmax/learning-rate settings without and with distillation."""
    if not any(n in groups for pair in ABLATION_ROWS.values() for n in pair):
        return None
    lines = ["| setting | w/o KD | w/ KD |", "|---|---|---|"]
    for label, pair in ABLATION_ROWS.items():
        cells = []
        for n in pair:
            rs = groups.get(n, [])
            cells.append(fmt(mean_std([r.report.avg_acc for r in rs]), len(rs)))
        lines.append(f"| {label} | {cells[0]} | {cells[1]} |")
    return "\n".join(lines) + "\n"


def plot_accuracy_curves(groups: dict[str, list[RunRecord]], path: Path) -> bool:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for name, rs in groups.items():
        curves = [r.matrix.overall for r in rs if r.matrix is not None]
        if not curves:
            continue
        n = min(len(c) for c in curves)
        arr = np.array([c[:n] for c in curves])
        ax.errorbar(np.arange(n), arr.mean(0), yerr=arr.std(0) if len(arr) > 1 else None, label=name, capsize=2,
                    marker="o", ms=3)
        drawn = True
    if not drawn:
        plt.close(fig)
        return False
    ax.set_xlabel("incremental step")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_weight_norms(groups: dict[str, list[RunRecord]], path: Path) -> bool:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [n for n, rs in groups.items() if any(r.report.weight_norm_old is not None for r in rs)]
    if not names:
        return False
    old = [np.mean([r.report.weight_norm_old for r in groups[n] if r.report.weight_norm_old is not None]) for n in names]
    new = [np.mean([r.report.weight_norm_new for r in groups[n] if r.report.weight_norm_new is not None]) for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names)), 4))
    ax.bar(x - 0.2, old, 0.4, label="old classes")
    ax.bar(x + 0.2, new, 0.4, label="new classes")
    ax.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean L2 norm of head weights")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def render_report(results_dir, out_dir=None) -> RenderResult:
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"results directory not found: {root}")
    out = Path(out_dir) if out_dir else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    runs, warnings = collect_runs(root)
    res = RenderResult(warnings=warnings)
    for w in warnings:
        log.warning(w)
    groups = group(runs)
    if not groups:
        res.warnings.append("no completed runs to render")
        return res
    res.tables += write_summary(summary_rows(groups), out)
    abl = ablation_table(groups)
    if abl:
        (out / "ablation.md").write_text(abl)
        res.tables.append(out / "ablation.md")
    if plot_accuracy_curves(groups, out / "accuracy_curves.png"):
        res.plots.append(out / "accuracy_curves.png")
    if plot_weight_norms(groups, out / "weight_norms.png"):
        res.plots.append(out / "weight_norms.png")
    return res
