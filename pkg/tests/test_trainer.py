import math

import numpy as np
import pytest
import torch

from classil.config import ExperimentConfig, TrainConfig
from classil.data import make_toy_benchmark
from classil.experiment import build_model, run_experiment
from classil.memory import ExemplarMemory
from classil.model import snapshot
from classil.protocol import build_schedule, task_view
from classil.trainer import (
    StepContractError,
    TrainContext,
    derive_seed,
    incremental_step,
    init_memory,
    lr_at,
    prepare_step,
    train_base_task,
)

SPLITS = make_toy_benchmark(num_superclasses=2, classes_per_superclass=3, dim=8, train_per_class=20,
                            test_per_class=10, seed=0)
FAST = dict(epochs_base=2, epochs_incremental=2, batch_size=16)


def _cfg(**train):
    return ExperimentConfig(base_count=2, num_tasks=2, memory_size=12, arch_options={"hidden": 16, "out_dim": 8},
                            save_checkpoints=False, train=TrainConfig(**{**FAST, **train})).validate()


def test_derive_seed_is_stable_and_purpose_specific():
    assert derive_seed(0, "memory", 1) == derive_seed(0, "memory", 1)
    assert derive_seed(0, "memory", 1) != derive_seed(0, "memory", 2)
    assert derive_seed(0, "memory") != derive_seed(0, "replay")
    assert derive_seed(0, "x") != derive_seed(1, "x")
    assert 0 <= derive_seed(123, "x") < 2**63


def test_lr_schedules():
    assert lr_at(0, 10, 0.1, 1e-4, "cosine") == pytest.approx(0.1)
    assert lr_at(5, 10, 0.1, 0.0, "cosine") == pytest.approx(0.05)
    assert lr_at(59, 100, 0.1, 0, "step", [60, 90]) == pytest.approx(0.1)
    assert lr_at(60, 100, 0.1, 0, "step", [60, 90]) == pytest.approx(0.01)
    assert lr_at(95, 100, 0.1, 0, "step", [60, 90]) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        lr_at(0, 1, 0.1, 0, "linear")


def test_teacher_frozen_before_memory_update_before_first_update():
    r = run_experiment(_cfg(), seed=0, splits=SPLITS, keep_model=False)
    names = [e[0] for e in r.events]
    assert names[0] == "memory_update"  # base-class exemplars after base training
    per_step = {}
    for name, info in r.events:
        if "step" in info and info["step"] > 0:
            per_step.setdefault(info["step"], []).append(name)
    assert per_step == {1: ["snapshot", "memory_update", "first_update"], 2: ["snapshot", "memory_update", "first_update"]}
    # memory seen by the first update already covers the step's new classes
    for name, info in r.events:
        if name == "first_update":
            assert len(info["memory_classes"]) == len(r.schedule.seen_classes(info["step"]))


def test_each_new_batch_is_paired_with_an_exemplar_batch():
    r = run_experiment(_cfg(softmax_mode="sep"), seed=0, splits=SPLITS, keep_model=False)
    for s in r.steps[1:]:
        # 2 new classes x 20 samples in batches of 16 -> 3 batches per epoch, 2 epochs
        assert s["updates"] == 6
        assert s["exemplar_batches"] == s["updates"]
        assert s["exemplars_total"] <= 12


def test_merged_batches_fold_exemplars_into_one_stream():
    r = run_experiment(_cfg(softmax_mode="comb", merge_batches=True), seed=0, splits=SPLITS, keep_model=False)
    s1 = r.steps[1]
    # 40 new samples + 2 old classes x 4 exemplars = 48 -> 3 batches of 16, 2 epochs
    assert s1["exemplar_batches"] == 0
    assert s1["updates"] == 2 * math.ceil((40 + 2 * 4) / 16)


def test_runs_are_deterministic():
    a = run_experiment(_cfg(), seed=3, splits=SPLITS, keep_model=True)
    b = run_experiment(_cfg(), seed=3, splits=SPLITS, keep_model=True)
    assert a.matrix == b.matrix
    assert a.memory == b.memory
    assert a.model.parameter_hash() == b.model.parameter_hash()
    c = run_experiment(_cfg(), seed=4, splits=SPLITS, keep_model=True)
    assert c.model.parameter_hash() != a.model.parameter_hash()


def test_adaptive_lambda_is_logged_per_step():
    splits = make_toy_benchmark(num_superclasses=6, classes_per_superclass=10, dim=8, train_per_class=4,
                                test_per_class=2, seed=1)
    cfg = ExperimentConfig(base_count=50, num_tasks=1, memory_size=60, arch_options={"hidden": 16, "out_dim": 8},
                           save_checkpoints=False, train=TrainConfig(epochs_base=1, epochs_incremental=1,
                                                                     batch_size=32, lambda_base=5.0))
    r = run_experiment(cfg, seed=0, splits=splits, keep_model=False)
    assert r.steps[1]["lambda"] == pytest.approx(16.510, abs=1e-3)
    off = run_experiment(cfg.replace(**{"train.kd_enabled": False}), seed=0, splits=splits, keep_model=False)
    assert off.steps[1]["lambda"] == 0.0


def test_incremental_step_refuses_stale_memory():
    cfg = _cfg()
    schedule = build_schedule(SPLITS.num_classes, 2, 2, 0)
    ctx = TrainContext(SPLITS.train, schedule, 0)
    model = build_model(cfg, SPLITS.train.inputs.shape[1:], 2, 0)
    view0 = task_view(schedule, 0, SPLITS.train)
    train_base_task(model, view0, cfg.train, ctx)
    memory = init_memory(model, view0, 12, ctx)
    view1 = task_view(schedule, 1, SPLITS.train)
    teacher = snapshot(model)
    model.expand_head(2)
    with pytest.raises(StepContractError, match="memory"):
        incremental_step(model, teacher, memory, view1, cfg.train, ctx)


def test_incremental_step_refuses_unexpanded_head():
    cfg = _cfg()
    schedule = build_schedule(SPLITS.num_classes, 2, 2, 0)
    ctx = TrainContext(SPLITS.train, schedule, 0)
    model = build_model(cfg, SPLITS.train.inputs.shape[1:], 2, 0)
    view1 = task_view(schedule, 1, SPLITS.train)
    mem = ExemplarMemory(12, {c: [0] for c in view1.seen_class_ids}, 1)
    with pytest.raises(StepContractError, match="span"):
        incremental_step(model, snapshot(model), mem, view1, cfg.train, ctx)


def test_prepare_step_teacher_matches_pre_step_model():
    cfg = _cfg()
    schedule = build_schedule(SPLITS.num_classes, 2, 2, 0)
    ctx = TrainContext(SPLITS.train, schedule, 0)
    model = build_model(cfg, SPLITS.train.inputs.shape[1:], 2, 0)
    view0 = task_view(schedule, 0, SPLITS.train)
    memory = init_memory(model, view0, 12, ctx)
    before = model.parameter_hash()
    teacher, memory = prepare_step(model, memory, task_view(schedule, 1, SPLITS.train), 12, ctx)
    assert teacher.parameter_hash() == before
    assert teacher.num_classes == 2 and model.num_classes == 4
    assert memory.per_class == 3 and set(memory.sets) == set(schedule.seen_classes(1))


def test_self_distillation_refreezes_teacher_each_generation():
    cfg = _cfg().replace(**{"self_distill.generations": 2, "self_distill.epochs_per_generation": 1})
    r = run_experiment(cfg, seed=0, splits=SPLITS, keep_model=False)
    sd = [info for name, info in r.events if name == "sd_teacher"]
    assert [e["generation"] for e in sd] == [0, 1]
    assert sd[0]["hash"] != sd[1]["hash"]


def test_stop_after_base_and_checkpoint_reuse(tmp_path):
    cfg = _cfg().replace(output_dir=str(tmp_path), name="pre", stop_after_base=True, base_snapshot_epochs=[1])
    r = run_experiment(cfg, seed=0, splits=SPLITS)
    assert r.matrix.num_steps == 1
    ckpt = tmp_path / "pre" / "seed0" / "checkpoints" / "base_epoch1.pt"
    assert ckpt.exists()
    cont = _cfg().replace(output_dir=str(tmp_path), name="cont",
                          init_base_from="{output_dir}/pre/seed{seed}/checkpoints/base_epoch1.pt")
    r2 = run_experiment(cont, seed=0, splits=SPLITS)
    assert r2.matrix.num_steps == 3
    assert not [e for e in r2.events if e[0] == "sd_teacher"]


def test_all_softmax_modes_train_finite():
    for mode, merge in (("sep", False), ("comb", False), ("comb", True)):
        r = run_experiment(_cfg(softmax_mode=mode, merge_batches=merge), seed=0, splits=SPLITS, keep_model=False)
        assert all(np.isfinite(v) for s in r.steps[1:] for v in s["losses"].values())
        assert r.report.weight_norm_old is not None
