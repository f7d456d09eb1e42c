"""Declarative experiment configuration.

Every field is JSON-serialisable; ``ExperimentConfig.from_dict(cfg.to_dict())``
reproduces ``cfg`` exactly, and a run is determined by the config alone.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .regularizers import REGULARIZERS


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass
class TrainConfig:
    epochs_base: int = 120
    epochs_incremental: int = 240
    lr_base: float = 0.1
    lr_incremental: float = 0.01
    lr_min: float = 1e-4
    schedule: str = "cosine"
    milestones_base: list[int] = field(default_factory=list)
    milestones_incremental: list[int] = field(default_factory=list)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 100
    softmax_mode: str = "sep"
    kd_enabled: bool = True
    lambda_base: float = 5.0
    adaptive_weighting: bool = True
    kd_temperature: float = 1.0
    merge_batches: bool = False  # comb only: one stream over new data + old exemplars
    decay_scale: bool = False  # weight decay on the cosine-head scale


@dataclass
class SelfDistillConfig:
    generations: int = 0
    epochs_per_generation: int = 70
    lr: float = 0.1
    lr_min: float = 1e-3
    schedule: str = "cosine"
    milestones: list[int] = field(default_factory=list)
    kd_weight: float = 1.0
    temperature: float = 1.0


@dataclass
class RegularizerConfig:
    name: str = "none"
    ls_epsilon: float = 0.1
    mixup_alpha: float = 0.2
    cutout: int = 16
    crop_pad: int = 4


@dataclass
class ExperimentConfig:
    name: str = "run"
    dataset: str = "toy"
    data_path: str | None = None
    dataset_options: dict = field(default_factory=dict)
    base_count: int = 8
    num_tasks: int = 4
    class_order_seed: int | None = None  # None: reuse the run seed
    memory_size: int = 2000
    arch: str = "mlp"
    arch_options: dict = field(default_factory=dict)
    head_mode: str = "cosine"
    classifier: str = "cnn"
    train: TrainConfig = field(default_factory=TrainConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    self_distill: SelfDistillConfig = field(default_factory=SelfDistillConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    ece_bins: int = 15
    feature_retention: bool = False
    retention_epochs: int = 60
    base_snapshot_epochs: list[int] = field(default_factory=list)
    init_base_from: str | None = None  # may contain {output_dir} and {seed}
    stop_after_base: bool = False
    save_checkpoints: bool = True

    def validate(self) -> "ExperimentConfig":
        t = self.train
        checks = [
            ("train.softmax_mode", t.softmax_mode in ("sep", "comb"), "must be 'sep' or 'comb'"),
            ("train.merge_batches", not (t.merge_batches and t.softmax_mode == "sep"),
             "merged batches only apply to the combined softmax"),
            ("train.schedule", t.schedule in ("cosine", "step"), "must be 'cosine' or 'step'"),
            ("train.batch_size", t.batch_size >= 1, "must be >= 1"),
            ("train.lambda_base", t.lambda_base > 0, "must be positive"),
            ("train.kd_temperature", t.kd_temperature > 0, "must be positive"),
            ("train.lr_incremental", t.lr_incremental > 0, "must be positive"),
            ("head_mode", self.head_mode in ("dot", "cosine"), "must be 'dot' or 'cosine'"),
            ("classifier", self.classifier in ("cnn", "nme"), "must be 'cnn' or 'nme'"),
            ("regularizer.name", self.regularizer.name in REGULARIZERS, f"must be one of {REGULARIZERS}"),
            ("regularizer.ls_epsilon", 0 <= self.regularizer.ls_epsilon < 1, "must lie in [0, 1)"),
            ("regularizer.mixup_alpha", self.regularizer.mixup_alpha > 0, "must be positive"),
            ("self_distill.generations", self.self_distill.generations >= 0, "must be >= 0"),
            ("memory_size", self.memory_size >= 1, "must be >= 1"),
            ("num_tasks", self.num_tasks >= 0, "must be >= 0"),
            ("seeds", bool(self.seeds) and all(s >= 0 for s in self.seeds), "needs non-negative seeds"),
            ("ece_bins", self.ece_bins >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, msg)
        if self.regularizer.name == "sd" and self.self_distill.generations == 0:
            raise ConfigError("self_distill.generations", "regularizer 'sd' needs at least one generation")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"train": TrainConfig, "regularizer": RegularizerConfig, "self_distill": SelfDistillConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigError(f"{key}.{sorted(bad)[0]}", "unknown field")
                d[key] = typ(**d[key])
        return cls(**d)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.lr_base": 0.05})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return ExperimentConfig.from_dict(d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(key, "unknown field")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown field")
    node[parts[-1]] = value


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()  # OSError propagates with the path
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
