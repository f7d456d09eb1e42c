"""End-to-end class-IL runs: base task, incremental steps, evaluation and artifacts.

Run directory layout::

    <output_dir>/<name>/seed<k>/
        manifest.json         config, seed, realised class order, fingerprint
        accuracy_matrix.csv   per-step, per-task accuracies + overall
        metrics.json          MetricsReport
        steps.jsonl           per-step lambda, exemplars per class, losses, weight norms
        memory/step<i>.json   exemplar sets as indices into the training split
        checkpoints/step<i>.pt, checkpoints/base_epoch<E>.pt
    <output_dir>/index.json   every run written under this directory
"""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .config import ExperimentConfig, save_config
from .data import DatasetSplits, load_dataset, make_toy_benchmark
from .memory import ExemplarMemory
from .model import IncrementalClassifier, build_extractor, load_checkpoint, save_checkpoint, weight_norms
from .protocol import ClassTaskSchedule, build_schedule, task_view
from .trainer import (
    StepRecord,
    TrainContext,
    derive_seed,
    evaluate,
    incremental_step,
    init_memory,
    prepare_step,
    run_self_distillation,
    torch_gen,
    train_base_task,
    train_epochs,
)

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    def __init__(self, step: int | str, cause: BaseException):
        super().__init__(f"run failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    schedule: ClassTaskSchedule
    matrix: M.AccuracyMatrix
    report: M.MetricsReport
    steps: list[dict] = field(default_factory=list)
    events: list = field(default_factory=list)
    model: IncrementalClassifier | None = None
    memory: ExemplarMemory | None = None
    run_dir: Path | None = None


def load_splits(cfg: ExperimentConfig) -> DatasetSplits:
    if cfg.dataset == "toy":
        return make_toy_benchmark(**cfg.dataset_options)
    return load_dataset(cfg.dataset, cfg.data_path)


def build_model(cfg: ExperimentConfig, input_shape, num_classes: int, seed: int) -> IncrementalClassifier:
    torch.manual_seed(derive_seed(seed, "init"))
    extractor = build_extractor(cfg.arch, tuple(input_shape), **cfg.arch_options)
    return IncrementalClassifier(extractor, num_classes, cfg.head_mode, generator=torch_gen(seed, "head", 0))


def _secondary_metrics(ev, schedule: ClassTaskSchedule, splits: DatasetSplits, bins: int) -> dict:
    """SS-NLL, SS-Acc and ECE of the first-task model on the base classes' test data."""
    out = {"ece": M.ece_from_logits(ev.logits, ev.positions, bins)}
    if splits.has_coarse and ev.logits.shape[1] >= 2:
        super_of_pos = splits.train.superclasses()[list(schedule.class_order)][: ev.logits.shape[1]]
        # a superclass with a single output class has no secondary mass when that class wins
        counts = np.bincount(super_of_pos)
        keep = counts[super_of_pos[ev.positions]] >= 2
        if keep.any():
            out["ss_nll"] = M.ss_nll(ev.logits[keep], ev.positions[keep], super_of_pos)
            out["ss_acc"] = M.ss_acc(ev.logits[keep], ev.positions[keep], super_of_pos)
    return out


def train_joint_model(cfg: ExperimentConfig, splits: DatasetSplits, schedule: ClassTaskSchedule, seed: int):
    """Upper-bound reference: the whole network trained on every class with full data."""
    ctx = TrainContext(splits.train, schedule, derive_seed(seed, "joint"), cfg.regularizer)
    model = build_model(cfg, splits.train.inputs.shape[1:], schedule.num_classes, derive_seed(seed, "joint"))
    t = cfg.train
    train_epochs(model, np.arange(len(splits.train)), ctx, t, t.epochs_base, t.lr_base, t.lr_min, t.schedule,
                 t.milestones_base, "joint")
    ev = evaluate(model, splits.test, schedule, schedule.num_tasks, ctx)
    return model, ev.overall


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, splits: DatasetSplits | None = None,
                   out_dir: str | Path | None = None, keep_model: bool = True) -> RunResult:
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    splits = splits or load_splits(cfg)
    order_seed = seed if cfg.class_order_seed is None else cfg.class_order_seed
    schedule = build_schedule(splits.num_classes, cfg.base_count, cfg.num_tasks, order_seed)
    out_dir = out_dir or cfg.output_dir
    run_dir = Path(out_dir) / cfg.name / f"seed{seed}" if out_dir else None
    if run_dir:
        (run_dir / "memory").mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        _write_manifest(run_dir, cfg, seed, schedule)

    ctx = TrainContext(splits.train, schedule, seed, cfg.regularizer)
    matrix = M.AccuracyMatrix()
    steps: list[dict] = []
    t = cfg.train
    started = time.time()

    try:
        model = build_model(cfg, splits.train.inputs.shape[1:], cfg.base_count, seed)
        view = task_view(schedule, 0, splits.train)
        if cfg.init_base_from:
            src = cfg.init_base_from.format(output_dir=out_dir, seed=seed)
            model, _ = load_checkpoint(src, model.feature_extractor)
        else:
            def on_epoch(epoch, m):
                if run_dir and epoch in cfg.base_snapshot_epochs:
                    save_checkpoint(m, run_dir / "checkpoints" / f"base_epoch{epoch}.pt", epoch=epoch, seed=seed,
                                    fingerprint=cfg.fingerprint())
            train_base_task(model, view, t, ctx, on_epoch=on_epoch)
        if cfg.self_distill.generations:
            run_self_distillation(model, view.new_class_indices, cfg.self_distill, t, ctx)
    except Exception as e:
        raise RunError(0, e) from e

    memory = init_memory(model, view, cfg.memory_size, ctx)
    if run_dir:
        memory.dump(run_dir / "memory" / "step0.json")
    ev = evaluate(model, splits.test, schedule, 0, ctx)
    matrix.add_step(ev.per_task, ev.overall)
    secondary = _secondary_metrics(ev, schedule, splits, cfg.ece_bins)
    steps.append({"step": 0, "num_classes": model.num_classes, "overall": ev.overall})
    if run_dir and cfg.save_checkpoints:
        save_checkpoint(model, run_dir / "checkpoints" / "step0.pt", step=0, seed=seed, fingerprint=cfg.fingerprint())
    log.info("%s seed %d step 0: %.2f%%", cfg.name, seed, ev.overall)

    for step in range(1, 0 if cfg.stop_after_base else schedule.num_tasks + 1):
        try:
            view = task_view(schedule, step, splits.train)
            teacher, memory = prepare_step(model, memory, view, cfg.memory_size, ctx)
            model, memory, rec = incremental_step(model, teacher, memory, view, t, ctx)
        except Exception as e:
            raise RunError(step, e) from e
        ev = evaluate(model, splits.test, schedule, step, ctx, cfg.classifier, memory)
        matrix.add_step(ev.per_task, ev.overall)
        old_norm, new_norm = weight_norms(model, range(0, model.num_old), range(model.num_old, model.num_classes))
        steps.append(_step_dict(rec, memory, ev.overall, old_norm, new_norm))
        if run_dir:
            memory.dump(run_dir / "memory" / f"step{step}.json")
            if cfg.save_checkpoints:
                save_checkpoint(model, run_dir / "checkpoints" / f"step{step}.pt", step=step, seed=seed,
                                fingerprint=cfg.fingerprint())
        log.info("%s seed %d step %d: %.2f%% (lambda %.3f)", cfg.name, seed, step, ev.overall, rec.lam)

    retention = None
    if cfg.feature_retention:
        _, joint_acc = train_joint_model(cfg, splits, schedule, seed)
        pos = ctx.position_of
        retention = M.feature_retention(
            lambda x: _features(model, x),
            (splits.train.inputs, pos[splits.train.fine]),
            (splits.test.inputs, pos[splits.test.fine]),
            joint_acc,
            M.ProbeConfig(epochs=cfg.retention_epochs, batch_size=t.batch_size, seed=derive_seed(seed, "probe")),
        )

    last = steps[-1]
    report = M.MetricsReport(
        avg_acc=M.average_incremental_accuracy(matrix, 1 if cfg.stop_after_base else schedule.num_tasks + 1),
        forgetting=M.forgetting_from_matrix(matrix),
        feature_retention=retention,
        ss_nll=secondary.get("ss_nll"),
        ss_acc=secondary.get("ss_acc"),
        ece=secondary.get("ece"),
        weight_norm_old=last.get("weight_norm_old"),
        weight_norm_new=last.get("weight_norm_new"),
        provenance={
            "fingerprint": cfg.fingerprint(),
            "seed": seed,
            "checkpoints": [f"checkpoints/step{i}.pt" for i in range(matrix.num_steps)] if cfg.save_checkpoints else [],
            "seconds": round(time.time() - started, 2),
        },
    )
    if run_dir:
        matrix.to_csv(run_dir / "accuracy_matrix.csv")
        M.write_report(report, run_dir / "metrics.json")
        with open(run_dir / "steps.jsonl", "w") as fh:
            for s in steps:
                fh.write(json.dumps(s) + "\n")
        _update_index(Path(out_dir), run_dir, cfg, seed)
    return RunResult(cfg, seed, schedule, matrix, report, steps, ctx.events,
                     model if keep_model else None, memory, run_dir)


@torch.no_grad()
def _features(model, x: np.ndarray) -> np.ndarray:
    model.eval()
    xt = torch.from_numpy(np.ascontiguousarray(x)).float()
    return torch.cat([model.features(xt[i : i + 512]) for i in range(0, len(xt), 512)]).numpy()


def _step_dict(rec: StepRecord, memory: ExemplarMemory, overall: float, old_norm, new_norm) -> dict:
    return {
        "step": rec.step,
        "lambda": rec.lam,
        "num_old": rec.num_old,
        "num_new": rec.num_new,
        "exemplars_per_class": memory.per_class,
        "exemplars_total": memory.total,
        "updates": rec.updates,
        "exemplar_batches": rec.exemplar_batches,
        "losses": rec.last_losses,
        "overall": overall,
        "weight_norm_old": old_norm,
        "weight_norm_new": new_norm,
    }


def _write_manifest(run_dir: Path, cfg: ExperimentConfig, seed: int, schedule: ClassTaskSchedule) -> None:
    save_config(cfg, run_dir / "config.json")
    manifest = {
        "name": cfg.name,
        "seed": seed,
        "fingerprint": cfg.fingerprint(),
        "schedule": schedule.to_dict(),
        "regularizer": vars(cfg.regularizer),
        "self_distill": vars(cfg.self_distill),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "config": cfg.to_dict(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _update_index(root: Path, run_dir: Path, cfg: ExperimentConfig, seed: int) -> None:
    path = root / "index.json"
    index = json.loads(path.read_text()) if path.exists() else {"runs": []}
    rel = str(run_dir.relative_to(root))
    index["runs"] = [r for r in index["runs"] if r["path"] != rel]
    index["runs"].append({"name": cfg.name, "seed": seed, "path": rel, "fingerprint": cfg.fingerprint()})
    path.write_text(json.dumps(index, indent=2))


def run_all_seeds(cfg: ExperimentConfig, splits: DatasetSplits | None = None, keep_model: bool = False) -> list[RunResult]:
    splits = splits or load_splits(cfg)
    return [run_experiment(cfg, s, splits, keep_model=keep_model) for s in cfg.seeds]
