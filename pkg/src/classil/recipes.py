"""Canned experiment recipes.

A recipe is a pure function of ``(scale, output_dir, seeds)`` that expands to
an ordered list of ``ExperimentConfig``; nothing is trained here. The
``paper`` scale is the full CIFAR-100 protocol (ResNet-32, 50 base classes,
K=2000); the ``desk`` scale swaps in the synthetic toy benchmark and a small
MLP so a recipe finishes in minutes on a CPU.
"""
from __future__ import annotations

from .config import ExperimentConfig, RegularizerConfig, SelfDistillConfig, TrainConfig

RECIPES = ("desk", "ablation-fig4", "regularizers-table2", "overfit-sec52", "sota-table5", "table3-icarl")
SCALES = ("paper", "desk")

# toy benchmark and training budget used by every desk-scale recipe
DESK_DATA = {"train_per_class": 300, "test_per_class": 100, "noise": 1.75}
DESK_ARCH = {"hidden": 128, "out_dim": 64}
DESK_TRAIN = dict(epochs_base=30, epochs_incremental=150, lr_base=0.1, lr_incremental=0.03, lr_min=1e-4,
                  batch_size=64, lambda_base=0.5)
DESK_MEMORY = 100


class RecipeError(ValueError):
    pass


def paper_base(num_tasks: int = 5, dataset: str = "cifar100") -> ExperimentConfig:
    """CCIL on CIFAR-100 (or ImageNet-100 / ImageNet) with the published optimiser settings."""
    if dataset == "cifar100":
        return ExperimentConfig(name="ccil", dataset="cifar100", base_count=50, num_tasks=num_tasks,
                                class_order_seed=1993, memory_size=2000, arch="resnet32", head_mode="cosine",
                                regularizer=RegularizerConfig(name="none"),
                                train=TrainConfig(lambda_base=5.0), seeds=[0, 1, 2, 3, 4])
    if dataset == "imagenet100":
        tr = TrainConfig(epochs_base=70, epochs_incremental=70, schedule="step", milestones_base=[30, 60],
                         milestones_incremental=[30, 60], lr_incremental=0.01, lambda_base=20.0, batch_size=128,
                         weight_decay=1e-4)
        return ExperimentConfig(name="ccil", dataset="imagenet100", base_count=50, num_tasks=num_tasks,
                                class_order_seed=1993, memory_size=2000, arch="resnet18", train=tr, seeds=[0])
    if dataset == "imagenet":
        tr = TrainConfig(epochs_base=70, epochs_incremental=40, schedule="step", milestones_base=[30, 60],
                         milestones_incremental=[25, 35], lr_incremental=0.01, lambda_base=600.0, batch_size=256,
                         weight_decay=1e-4)
        return ExperimentConfig(name="ccil", dataset="imagenet", base_count=500, num_tasks=num_tasks,
                                class_order_seed=1993, memory_size=20000, arch="resnet18", train=tr, seeds=[0])
    raise RecipeError(f"no paper-scale base for dataset {dataset!r}")


def desk_base() -> ExperimentConfig:
    return ExperimentConfig(name="ccil", dataset="toy", dataset_options=dict(DESK_DATA), base_count=8, num_tasks=4,
                            memory_size=DESK_MEMORY, arch="mlp", arch_options=dict(DESK_ARCH), head_mode="cosine",
                            train=TrainConfig(**DESK_TRAIN), seeds=[0, 1, 2])


def _base(scale: str) -> ExperimentConfig:
    if scale not in SCALES:
        raise RecipeError(f"unknown scale {scale!r}; expected one of {SCALES}")
    return paper_base() if scale == "paper" else desk_base()


def ablation_grid(base: ExperimentConfig) -> list[ExperimentConfig]:
    """{comb, sep} x {base LR, low LR} x {no KD, KD} with a linear head, as in the weight-norm study."""
    out = []
    t = base.train
    for kd in (False, True):
        for mode in ("comb", "sep"):
            for low in (False, True):
                name = f"{mode}{'-lowlr' if low else ''}-{'kd' if kd else 'nokd'}"
                out.append(base.replace(**{
                    "name": name,
                    "head_mode": "dot",
                    "train.softmax_mode": mode,
                    "train.merge_batches": mode == "comb",
                    "train.kd_enabled": kd,
                    "train.lr_incremental": t.lr_incremental if low else t.lr_base,
                }))
    return out


def regularizer_rows(base: ExperimentConfig, scale: str) -> list[ExperimentConfig]:
    sd = SelfDistillConfig(generations=4, epochs_per_generation=70 if scale == "paper" else 20,
                           lr=0.1, lr_min=1e-3)
    rows = [base.replace(name="ccil")]
    rows.append(ExperimentConfig.from_dict({**base.to_dict(), "name": "ccil-sd", "self_distill": vars(sd),
                                            "regularizer": {**vars(base.regularizer), "name": "sd"}}))
    # heavy augmentation needs image inputs, so the toy benchmark skips that row
    for name in ("h-aug", "ls", "mixup") if scale == "paper" else ("ls", "mixup"):
        rows.append(base.replace(**{"name": f"ccil-{name}", "regularizer.name": name}))
    return rows


def overfit_study(base: ExperimentConfig, scale: str) -> list[ExperimentConfig]:
    """One long base run that saves snapshots, then one class-IL run started from each snapshot."""
    if scale == "paper":
        total, every, milestones = 500, 100, [60, 90]
    else:
        total, every, milestones = 150, 30, [20, 30]
    snaps = list(range(every, total + 1, every))
    pre = base.replace(**{
        "name": "overfit-pretrain",
        "stop_after_base": True,
        "base_snapshot_epochs": snaps,
        "train.epochs_base": total,
        "train.schedule": "step",
        "train.milestones_base": milestones,
    })
    runs = [pre]
    for e in snaps:
        runs.append(base.replace(**{
            "name": f"overfit-epoch{e}",
            "init_base_from": "{output_dir}/overfit-pretrain/seed{seed}/checkpoints/base_epoch" + f"{e}.pt",
            "feature_retention": True,
        }))
    return runs


def sota_rows(scale: str) -> list[ExperimentConfig]:
    bases = [(n, paper_base(n)) for n in (5, 10)] if scale == "paper" else [(4, desk_base())]
    out = []
    for n, b in bases:
        epochs = 70 if scale == "paper" else 20
        out.append(b.replace(name=f"ccil-{n}tasks"))
        out.append(ExperimentConfig.from_dict({
            **b.to_dict(), "name": f"ccil-sd-{n}tasks",
            "self_distill": vars(SelfDistillConfig(generations=4, epochs_per_generation=epochs)),
            "regularizer": {**vars(b.regularizer), "name": "sd"},
        }))
    return out


def imagenet_rows() -> list[ExperimentConfig]:
    """Provided for completeness; far beyond desk compute."""
    return [paper_base(n, ds).replace(name=f"ccil-{ds}-{n}tasks") for ds in ("imagenet100", "imagenet") for n in (5, 10)]


def icarl_rows(base: ExperimentConfig) -> list[ExperimentConfig]:
    """Comb, iCaRL, iCaRL++ and CCIL rows of the component comparison."""
    t = base.train
    common = {"train.lr_incremental": t.lr_base, "train.softmax_mode": "comb", "train.merge_batches": True}
    return [
        base.replace(**common, **{"name": "comb", "head_mode": "dot", "train.kd_enabled": False}),
        base.replace(**common, **{"name": "icarl", "head_mode": "dot", "classifier": "nme",
                                  "train.adaptive_weighting": False}),
        base.replace(**common, **{"name": "icarl-pp", "head_mode": "cosine"}),
        base.replace(name="ccil", head_mode="cosine"),
    ]


def expand(recipe: str, scale: str = "paper", output_dir: str | None = None,
           seeds: list[int] | None = None) -> list[ExperimentConfig]:
    if recipe not in RECIPES:
        raise RecipeError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    if recipe == "desk":
        if scale != "desk":
            raise RecipeError("the desk recipe only exists at desk scale")
        runs = [desk_base()] + ablation_grid(desk_base())
    else:
        base = _base(scale)
        runs = {
            "ablation-fig4": lambda: ablation_grid(base),
            "regularizers-table2": lambda: regularizer_rows(base, scale),
            "overfit-sec52": lambda: overfit_study(base, scale),
            "sota-table5": lambda: sota_rows(scale),
            "table3-icarl": lambda: icarl_rows(base),
        }[recipe]()
    overrides = {}
    if output_dir is not None:
        overrides["output_dir"] = output_dir
    if seeds is not None:
        overrides["seeds"] = list(seeds)
    return [r.replace(**overrides).validate() for r in runs]
