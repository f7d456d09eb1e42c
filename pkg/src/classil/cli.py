"""Command line entry point: ``classil run | render | metrics``.

Exit status: 0 on success, 1 for usage or configuration errors, 2 when a run
or an IO operation fails. Every ``ExperimentConfig`` field has a flag named
after its dotted path (``--memory_size``, ``--train.lr_incremental``); flags
win over ``--config`` files and over recipe defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .data import DATA_ROOT_ENV, DatasetError
from .recipes import RECIPES, SCALES, RecipeError, expand

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("classil")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional(kind):
    def parse(text: str):
        return None if text.lower() in ("none", "null") else kind(text)

    parse.__name__ = kind.__name__
    return parse


def config_flags(cls=ExperimentConfig, prefix: str = "") -> list[tuple[str, dict]]:
    """(flag, add_argument kwargs) for every leaf field of the config dataclass tree."""
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        name = prefix + f.name
        if dataclasses.is_dataclass(hint):
            out += config_flags(hint, name + ".")
            continue
        args = typing.get_args(hint)
        optional = type(None) in args
        base = next((a for a in args if a is not type(None)), hint) if optional else hint
        origin = typing.get_origin(base)
        if origin is list:
            (item,) = typing.get_args(base)
            kw = {"nargs": "*", "type": item}
        elif base is dict or origin is dict:
            kw = {"type": json.loads, "metavar": "JSON"}
        elif base is bool:
            kw = {"type": _parse_bool, "metavar": "BOOL"}
        else:
            kw = {"type": _optional(base) if optional else base}
        kw.setdefault("metavar", f.name.upper())
        kw["default"] = argparse.SUPPRESS
        kw["dest"] = "cfg:" + name
        out.append(("--" + name, kw))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="classil", description="Class-incremental learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train and evaluate one config or a recipe",
                         epilog=f"Datasets other than 'toy' are read from --data_path or ${DATA_ROOT_ENV}/<name>.")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--recipe", choices=RECIPES)
    src.add_argument("--config", type=Path, help="JSON ExperimentConfig")
    run.add_argument("--scale", choices=SCALES, default="paper", help="recipe scale (default: paper)")
    run.add_argument("--jobs", type=int, default=1, help="seed replicas run in parallel processes")
    run.add_argument("--dry-run", action="store_true", help="print the expanded configs and exit")
    run.add_argument("--no-render", action="store_true")
    cfg = run.add_argument_group("config fields")
    for flag, kw in config_flags():
        cfg.add_argument(flag, **kw)

    ren = sub.add_parser("render", help="tables and plots from a results directory")
    ren.add_argument("results_dir", type=Path)
    ren.add_argument("--out", type=Path)

    met = sub.add_parser("metrics", help="print the metrics of a finished run")
    met.add_argument("run_dir", type=Path)
    met.add_argument("--recompute", action="store_true", help="recompute from accuracy_matrix.csv")
    return p


def _overrides(ns: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg:")}


def plan(ns: argparse.Namespace) -> list[ExperimentConfig]:
    overrides = _overrides(ns)
    if ns.recipe:
        configs = expand(ns.recipe, ns.scale)
    elif ns.config:
        configs = [load_config(ns.config)]
    else:
        configs = [ExperimentConfig()]
    return [c.replace(**overrides).validate() for c in configs]


def _run_one(args):
    from .experiment import run_experiment

    cfg, seed = args
    r = run_experiment(cfg, seed, keep_model=False)
    return cfg.name, seed, r.report.avg_acc, r.report.forgetting


def cmd_run(ns) -> int:
    configs = plan(ns)
    if ns.dry_run:
        print(json.dumps([c.to_dict() for c in configs], indent=2))
        return EXIT_OK
    for c in configs:
        if not c.output_dir:
            raise ConfigError("output_dir", "required to run (use --output_dir)")
    # dependent configs (snapshots feeding later runs) keep their order; seeds fan out
    for cfg in configs:
        jobs = [(cfg, s) for s in cfg.seeds]
        if ns.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
        for name, seed, acc, forg in results:
            print(f"{name} seed {seed}: avg acc {acc:.2f}  forgetting {forg:.2f}")
    if not ns.no_render:
        from .report import render_report

        for out in sorted({c.output_dir for c in configs}):
            res = render_report(out)
            for path in res.tables + res.plots:
                print(f"wrote {path}")
    return EXIT_OK


def cmd_render(ns) -> int:
    from .report import render_report

    res = render_report(ns.results_dir, ns.out)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for path in res.tables + res.plots:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_metrics(ns) -> int:
    from . import metrics as M

    run_dir = ns.run_dir
    path = run_dir / "metrics.json"
    if not path.exists():
        raise FileNotFoundError(f"no metrics.json in {run_dir}")
    out = json.loads(path.read_text())
    if ns.recompute:
        matrix = M.AccuracyMatrix.from_csv(run_dir / "accuracy_matrix.csv")
        out["avg_acc"] = M.average_incremental_accuracy(matrix)
        out["forgetting"] = M.forgetting_from_matrix(matrix)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": cmd_run, "render": cmd_render, "metrics": cmd_metrics}[ns.command]
    try:
        return handler(ns)
    except (ConfigError, RecipeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - surface any training failure as a runtime error
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
