"""Base-task training, the incremental step, self-distillation and full runs."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import SelfDistillConfig, TrainConfig
from .data import LabeledDataset
from .losses import (
    LogitsSplit,
    StepLosses,
    adaptive_lambda,
    combined_softmax_ce,
    inter_task_ce,
    intra_task_ce,
    kd_loss,
)
from .memory import ExemplarMemory, cycle_exemplar_batches, per_class_budget, update_exemplar_sets
from .model import IncrementalClassifier, ModelSnapshot, snapshot
from .protocol import ClassTaskSchedule, TaskView
from .config import RegularizerConfig as _RC
from .regularizers import Augmenter, label_smooth, mixup_batch, one_hot

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class StepContractError(RuntimeError):
    pass


# --- seeding -----------------------------------------------------------------

def derive_seed(seed: int, purpose: str, *extra: int) -> int:
    """Independent 63-bit seed for one purpose (shuffling, init, memory, ...) of a run."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(purpose.encode()), *extra))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def np_rng(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, *extra))


def torch_gen(seed: int, purpose: str, *extra: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, purpose, *extra))


def lr_at(epoch: int, epochs: int, lr: float, lr_min: float, schedule: str,
          milestones=(), decay: float = 0.1) -> float:
    if schedule == "cosine":
        return lr_min + (lr - lr_min) * (1 + math.cos(math.pi * epoch / max(epochs, 1))) / 2
    if schedule == "step":
        return lr * decay ** sum(epoch >= m for m in milestones)
    raise ValueError(f"unknown schedule {schedule!r}")


# --- training context -----------------------------------------------------------

@dataclass
class TrainContext:
    """Everything a training routine needs besides the model: data, label positions, randomness."""

    train: LabeledDataset
    schedule: ClassTaskSchedule
    seed: int = 0
    regularizer: _RC = field(default_factory=_RC)
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = torch.from_numpy(np.ascontiguousarray(self.train.inputs)).float()
        pos = np.full(max(self.schedule.num_classes, self.train.num_classes), -1, dtype=np.int64)
        pos[list(self.schedule.class_order)] = np.arange(self.schedule.num_classes)
        self.position_of = pos
        self.positions = torch.from_numpy(pos[self.train.fine])
        image_like = self.inputs.dim() == 4
        kind = "none"
        if image_like:
            kind = "heavy" if self.regularizer.name == "h-aug" else "crop_flip"
        elif self.regularizer.name == "h-aug":
            raise TrainingError("heavy augmentation needs image inputs")
        self.augmenter = Augmenter(kind, self.regularizer.crop_pad)
        if kind == "heavy":
            from .regularizers import default_policy_pool

            self.augmenter.pool = default_policy_pool(self.regularizer.cutout)

    def batch(self, idx: np.ndarray, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        t = torch.from_numpy(idx)
        return self.augmenter(self.inputs[t], rng), self.positions[t]

    def log_event(self, name: str, **info) -> None:
        self.events.append((name, info))

    @torch.no_grad()
    def features(self, model, idx: np.ndarray, batch: int = 512) -> np.ndarray:
        net = model if isinstance(model, ModelSnapshot) else model.eval()
        out = [net.features(self.inputs[torch.from_numpy(idx[i : i + batch])]) for i in range(0, len(idx), batch)]
        return torch.cat(out).numpy() if out else np.zeros((0, 0))


def make_optimizer(model: IncrementalClassifier, lr: float, cfg: TrainConfig) -> torch.optim.SGD:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if name == "scale" and not cfg.decay_scale else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=lr, momentum=cfg.momentum)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _targets(positions: torch.Tensor, offset: int, width: int, reg: _RC) -> torch.Tensor | None:
    """Soft targets over a span when label smoothing or mixup is active, else ``None``."""
    if reg.name not in ("ls", "mixup"):
        return None
    y = one_hot(positions - offset, width)
    if reg.name == "ls" and width >= 2:
        y = label_smooth(y, reg.ls_epsilon)
    return y


def _check_finite(loss: torch.Tensor, where: str, **diag):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss during {where}: {diag}")


def _regularized(ctx: TrainContext, x, pos, offset: int, width: int, rng):
    """Inputs plus targets (hard positions or soft distributions) after smoothing / mixup."""
    soft = _targets(pos, offset, width, ctx.regularizer)
    if soft is None:
        return x, pos
    if ctx.regularizer.name == "mixup":
        x, soft = mixup_batch(x, soft, ctx.regularizer.mixup_alpha, rng)
    return x, soft


# --- base task -------------------------------------------------------------------

def train_epochs(model, idx: np.ndarray, ctx: TrainContext, cfg: TrainConfig, epochs: int, lr: float,
                 lr_min: float, schedule: str, milestones, purpose: str, teacher: ModelSnapshot | None = None,
                 kd_weight: float = 0.0, temperature: float = 1.0, on_epoch=None):
    """Plain (optionally distilled) cross-entropy training over all head outputs."""
    opt = make_optimizer(model, lr, cfg)
    rng = np_rng(ctx.seed, purpose)
    n_cls = model.num_classes
    for epoch in range(epochs):
        _set_lr(opt, lr_at(epoch, epochs, lr, lr_min, schedule, milestones, cfg.lr_decay))
        model.train()
        perm = rng.permutation(idx)
        for start in range(0, len(perm), cfg.batch_size):
            x, pos = ctx.batch(perm[start : start + cfg.batch_size], rng)
            x, target = _regularized(ctx, x, pos, 0, n_cls, rng)
            logits = model(x)
            loss = combined_softmax_ce(LogitsSplit(logits, 0), target)
            if teacher is not None and kd_weight > 0:
                loss = loss + kd_weight * kd_loss(logits, teacher(x), temperature)
            _check_finite(loss, purpose, epoch=epoch, lr=opt.param_groups[0]["lr"])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return model


def train_base_task(model: IncrementalClassifier, view: TaskView, cfg: TrainConfig, ctx: TrainContext,
                    on_epoch=None) -> IncrementalClassifier:
    if view.step != 0 or view.old_class_ids:
        raise StepContractError("train_base_task needs the step-0 view")
    return train_epochs(model, view.new_class_indices, ctx, cfg, cfg.epochs_base, cfg.lr_base, cfg.lr_min,
                        cfg.schedule, cfg.milestones_base, "base", on_epoch=on_epoch)


def run_self_distillation(model: IncrementalClassifier, idx: np.ndarray, sd: SelfDistillConfig,
                          cfg: TrainConfig, ctx: TrainContext, on_generation=None) -> IncrementalClassifier:
    """Born-again generations: each generation starts by freezing the student as the new teacher."""
    for g in range(sd.generations):
        teacher = snapshot(model)
        ctx.log_event("sd_teacher", generation=g, hash=teacher.parameter_hash())
        train_epochs(model, idx, ctx, cfg, sd.epochs_per_generation, sd.lr, sd.lr_min, sd.schedule,
                     sd.milestones, f"sd{g}", teacher=teacher, kd_weight=sd.kd_weight, temperature=sd.temperature)
        if on_generation is not None:
            on_generation(g, teacher, model)
    return model


# --- incremental step -------------------------------------------------------------

def prepare_step(model: IncrementalClassifier, memory: ExemplarMemory, view: TaskView, capacity: int,
                 ctx: TrainContext, normalize_features: bool = False):
    """Freeze the teacher, grow the head and rebuild memory, in that order, before any update."""
    teacher = snapshot(model)
    ctx.log_event("snapshot", step=view.step, hash=teacher.parameter_hash())
    t = len(view.seen_class_ids)
    model.expand_head(len(view.new_class_ids), torch_gen(ctx.seed, "head", view.step))
    m = per_class_budget(capacity, t)
    pools = {c: view.new_class_indices[view.new_class_data.fine == c] for c in view.new_class_ids}
    memory = update_exemplar_sets(pools, memory, m, lambda idx: ctx.features(teacher, idx),
                                  derive_seed(ctx.seed, "memory", view.step), normalize_features)
    ctx.log_event("memory_update", step=view.step, classes=sorted(memory.sets), per_class=m)
    return teacher, memory


def init_memory(model, view: TaskView, capacity: int, ctx: TrainContext, normalize_features: bool = False) -> ExemplarMemory:
    """Exemplar sets for the base classes, selected with the trained base model."""
    net = snapshot(model)
    pools = {c: view.new_class_indices[view.new_class_data.fine == c] for c in view.new_class_ids}
    memory = update_exemplar_sets(pools, ExemplarMemory(capacity), per_class_budget(capacity, len(pools)),
                                  lambda idx: ctx.features(net, idx), derive_seed(ctx.seed, "memory", view.step),
                                  normalize_features)
    ctx.log_event("memory_update", step=view.step, classes=sorted(memory.sets), per_class=memory.per_class)
    return memory


@dataclass
class StepRecord:
    step: int
    lam: float
    num_old: int
    num_new: int
    updates: int = 0
    exemplar_batches: int = 0
    last_losses: dict = field(default_factory=dict)


def incremental_step(model: IncrementalClassifier, teacher: ModelSnapshot, memory: ExemplarMemory,
                     view: TaskView, cfg: TrainConfig, ctx: TrainContext) -> tuple[IncrementalClassifier, ExemplarMemory, StepRecord]:
    """Train one incremental task with the compositional loss.

    Each new-class batch is paired with a balanced exemplar batch. With
    ``cfg.merge_batches`` (combined softmax only) the old-class exemplars are
    instead shuffled into the new-class stream and there is no paired batch.
    """
    s, t = len(view.old_class_ids), len(view.seen_class_ids)
    missing = set(view.seen_class_ids) - set(memory.sets)
    if missing:
        raise StepContractError(f"memory lacks exemplars for classes {sorted(missing)}; update it first")
    if teacher.num_classes != s or model.num_classes != t or model.num_old != s:
        raise StepContractError(
            f"span mismatch: teacher {teacher.num_classes}, model {model.num_classes}/{model.num_old}, expected {s}/{t}"
        )
    n_new = t - s
    lam = adaptive_lambda(n_new, s, cfg.lambda_base) if cfg.adaptive_weighting else cfg.lambda_base
    use_kd = cfg.kd_enabled and s > 0
    record = StepRecord(view.step, lam if use_kd else 0.0, s, n_new)
    opt = make_optimizer(model, cfg.lr_incremental, cfg)
    rng = np_rng(ctx.seed, "incremental", view.step)
    replay = cycle_exemplar_batches(memory, cfg.batch_size, derive_seed(ctx.seed, "replay", view.step))
    pool = view.new_class_indices
    if cfg.merge_batches:
        # single-stream baseline: new data and old exemplars shuffled together, no paired replay
        old_ex = [i for c in view.old_class_ids for i in memory.sets[c]]
        pool = np.concatenate([pool, np.asarray(old_ex, dtype=np.int64)])
        replay = iter(())
    zero = torch.zeros(())
    for epoch in range(cfg.epochs_incremental):
        _set_lr(opt, lr_at(epoch, cfg.epochs_incremental, cfg.lr_incremental, cfg.lr_min, cfg.schedule,
                           cfg.milestones_incremental, cfg.lr_decay))
        model.train()
        perm = rng.permutation(pool)
        for start in range(0, len(perm), cfg.batch_size):
            if record.updates == 0:
                ctx.log_event("first_update", step=view.step, memory_classes=sorted(memory.sets))
            x, pos = ctx.batch(perm[start : start + cfg.batch_size], rng)
            if cfg.softmax_mode == "sep":
                x, target = _regularized(ctx, x, pos, s, n_new, rng)
                split = model.split(x)
                ce_new = intra_task_ce(split, target)
            else:
                x, target = _regularized(ctx, x, pos, 0, t, rng)
                split = model.split(x)
                ce_new = combined_softmax_ce(split, target)
            kd_new = kd_loss(split.old, teacher(x), cfg.kd_temperature) if use_kd else zero

            ce_ex = kd_ex = zero
            ex = next(replay, None)
            if ex is not None:
                record.exemplar_batches += 1
                xe, pe = ctx.batch(ex[0], rng)
                xe, te = _regularized(ctx, xe, pe, 0, t, rng)
                split_e = model.split(xe)
                ce_ex = inter_task_ce(split_e, te)
                kd_ex = kd_loss(split_e.old, teacher(xe), cfg.kd_temperature) if use_kd else zero

            losses = StepLosses(ce_new, kd_new, ce_ex, kd_ex)
            loss = losses.total(record.lam)
            _check_finite(loss, f"incremental step {view.step}", epoch=epoch, **losses.as_floats())
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.updates += 1
        record.last_losses = losses.as_floats()
    return model, memory, record


# --- evaluation --------------------------------------------------------------------

@torch.no_grad()
def predict_logits(model, inputs: torch.Tensor, batch: int = 512) -> torch.Tensor:
    net = model if isinstance(model, ModelSnapshot) else model.eval()
    return torch.cat([net(inputs[i : i + batch]) for i in range(0, len(inputs), batch)])


@torch.no_grad()
def nme_predict(model, memory: ExemplarMemory, ctx: TrainContext, inputs: torch.Tensor) -> torch.Tensor:
    """Nearest mean of (L2-normalised) exemplar features; returns head positions."""
    net = model if isinstance(model, ModelSnapshot) else model.eval()
    classes = sorted(memory.sets, key=lambda c: ctx.position_of[c])
    means = []
    for c in classes:
        f = F.normalize(torch.from_numpy(ctx.features(net, np.asarray(memory.sets[c]))), dim=1)
        means.append(F.normalize(f.mean(0), dim=0))
    means = torch.stack(means)
    feats = F.normalize(torch.cat([net.features(inputs[i : i + 512]) for i in range(0, len(inputs), 512)]), dim=1)
    nearest = torch.cdist(feats, means).argmin(1)
    return torch.as_tensor([ctx.position_of[classes[i]] for i in nearest.tolist()], dtype=torch.long)


@dataclass
class Evaluation:
    per_task: list[float]
    overall: float
    logits: np.ndarray
    positions: np.ndarray


def evaluate(model, test: LabeledDataset, schedule: ClassTaskSchedule, step: int, ctx: TrainContext,
             classifier: str = "cnn", memory: ExemplarMemory | None = None) -> Evaluation:
    """Accuracy over all classes seen by ``step`` (argmax over all seen outputs), split per task."""
    seen = schedule.seen_classes(step)
    idx = test.indices_of(seen)
    inputs = torch.from_numpy(np.ascontiguousarray(test.inputs[idx])).float()
    positions = ctx.position_of[test.fine[idx]]
    logits = predict_logits(model, inputs)
    if classifier == "nme" and memory:
        pred = nme_predict(model, memory, ctx, inputs).numpy()
    else:
        pred = logits.argmax(1).numpy()
    hit = pred == positions
    bounds = np.cumsum([0, *schedule.sizes[: step + 1]])
    per_task = [float(100 * hit[(positions >= lo) & (positions < hi)].mean()) for lo, hi in zip(bounds, bounds[1:])]
    return Evaluation(per_task, float(100 * hit.mean()), logits.numpy(), positions)
