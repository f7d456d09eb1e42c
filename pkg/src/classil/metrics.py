"""Evaluation quantities for class-incremental runs.

Accuracies are percentages. The secondary-logit metrics drop exactly one
maximum logit per sample (the lowest index on ties) before the softmax.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """``entries[i][j]``: accuracy on task ``j`` after step ``i`` (defined for ``j <= i``)."""

    entries: list[list[float]] = field(default_factory=list)
    overall: list[float] = field(default_factory=list)

    def add_step(self, per_task: Sequence[float], overall: float) -> None:
        if len(per_task) != len(self.entries) + 1:
            raise MetricError(f"step {len(self.entries)} needs {len(self.entries) + 1} task accuracies")
        values = [*per_task, overall]
        if any(not 0.0 <= v <= 100.0 for v in values):
            raise MetricError(f"accuracies outside [0, 100]: {values}")
        self.entries.append([float(v) for v in per_task])
        self.overall.append(float(overall))

    @property
    def num_steps(self) -> int:
        return len(self.entries)

    def to_csv(self, path) -> None:
        n = self.num_steps
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"task{j}" for j in range(n)], "overall"])
            for i, row in enumerate(self.entries):
                w.writerow([i, *[f"{v:.4f}" for v in row], *[""] * (n - len(row)), f"{self.overall[i]:.4f}"])

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        m = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        for row in rows:
            m.add_step([float(v) for v in row[1:-1] if v != ""], float(row[-1]))
        return m

    def to_dict(self) -> dict:
        return asdict(self)


def average_incremental_accuracy(matrix: AccuracyMatrix, expected_steps: int | None = None) -> float:
    if not matrix.overall:
        raise MetricError("accuracy matrix is empty")
    if expected_steps is not None and matrix.num_steps != expected_steps:
        raise MetricError(f"expected {expected_steps} evaluation points, got {matrix.num_steps}")
    return float(np.mean(matrix.overall))


def forgetting_rate(acc_first_task_initial: float, acc_first_task_final: float) -> float:
    return float(acc_first_task_initial) - float(acc_first_task_final)


def forgetting_from_matrix(matrix: AccuracyMatrix) -> float:
    return forgetting_rate(matrix.entries[0][0], matrix.entries[-1][0])


# --- secondary-logit metrics -------------------------------------------------

def _as_batch(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.shape[1] < 2:
        raise MetricError("secondary metrics need at least two logits")
    if len(labels) != len(logits):
        raise MetricError("logits and labels differ in length")
    return logits, labels, single


def secondary_softmax(logits) -> np.ndarray:
    """Softmax with the (first) maximum logit removed from the support; it gets probability 0."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)).copy()
    top = z.argmax(axis=1)
    z[np.arange(len(z)), top] = -np.inf
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _superclass_mass(probs: np.ndarray, superclass_of: np.ndarray) -> np.ndarray:
    n_super = int(superclass_of.max()) + 1
    mass = np.zeros((len(probs), n_super))
    for j in range(n_super):
        mass[:, j] = probs[:, superclass_of == j].sum(axis=1)
    return mass


def ss_nll(logits, fine_label, superclass_of) -> float:
    """Negative log of the secondary-softmax mass falling in the true superclass (batch mean).

    ``logits`` columns index classes ``0..C-1``; ``superclass_of[c]`` is the superclass of class ``c``.
    """
    logits, labels, _ = _as_batch(logits, fine_label)
    superclass_of = np.asarray(superclass_of, dtype=np.int64)[: logits.shape[1]]
    mass = _superclass_mass(secondary_softmax(logits), superclass_of)
    true_mass = mass[np.arange(len(labels)), superclass_of[labels]]
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(true_mass)))


def ss_acc(logits, fine_label, superclass_of) -> float:
    """Percent of samples whose secondary argmax lies in the true superclass."""
    logits, labels, _ = _as_batch(logits, fine_label)
    superclass_of = np.asarray(superclass_of, dtype=np.int64)[: logits.shape[1]]
    z = logits.copy()
    z[np.arange(len(z)), z.argmax(axis=1)] = -np.inf
    pred = z.argmax(axis=1)
    return float(100.0 * np.mean(superclass_of[pred] == superclass_of[labels]))


# --- calibration ---------------------------------------------------------------

def ece(confidences, correct, num_bins: int = 15) -> float:
    """Binned expected calibration error over equal-width bins ``(k/n, (k+1)/n]``."""
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if num_bins < 1:
        raise MetricError("num_bins must be >= 1")
    if conf.size == 0:
        raise MetricError("no predictions to calibrate")
    if conf.shape != hit.shape:
        raise MetricError("confidences and correctness flags differ in shape")
    bins = np.clip(np.ceil(conf * num_bins).astype(int) - 1, 0, num_bins - 1)
    total = 0.0
    for b in range(num_bins):
        sel = bins == b
        if sel.any():
            total += sel.mean() * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def ece_from_logits(logits, labels, num_bins: int = 15) -> float:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return ece(p.max(axis=1), p.argmax(axis=1) == np.asarray(labels), num_bins)


# --- representation diagnostics ------------------------------------------------

def class_means(features: np.ndarray, labels: np.ndarray, classes) -> dict[int, np.ndarray]:
    out = {}
    for c in classes:
        sel = labels == c
        if not sel.any():
            raise MetricError(f"class {c} has no samples")
        out[int(c)] = features[sel].mean(axis=0)
    return out


def class_mean_distance_ratios(features_a, features_b, labels, class_pairs) -> dict[tuple[int, int], float]:
    """Per pair, class-mean distance under ``a`` divided by the distance under baseline ``b``."""
    labels = np.asarray(labels)
    classes = sorted({c for pair in class_pairs for c in pair})
    mu_a = class_means(np.asarray(features_a, dtype=np.float64), labels, classes)
    mu_b = class_means(np.asarray(features_b, dtype=np.float64), labels, classes)
    return {
        (i, j): float(np.linalg.norm(mu_a[i] - mu_a[j]) / np.linalg.norm(mu_b[i] - mu_b[j]))
        for i, j in class_pairs
    }


def similar_dissimilar_pairs(classes, superclass_of) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    similar, dissimilar = [], []
    classes = list(classes)
    for a in range(len(classes)):
        for b in range(a + 1, len(classes)):
            i, j = classes[a], classes[b]
            (similar if superclass_of[i] == superclass_of[j] else dissimilar).append((i, j))
    return similar, dissimilar


@dataclass
class MetricsReport:
    avg_acc: float
    forgetting: float
    feature_retention: float | None = None
    ss_nll: float | None = None
    ss_acc: float | None = None
    ece: float | None = None
    weight_norm_old: float | None = None
    weight_norm_new: float | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def weight_norm_gap(self) -> float | None:
        if self.weight_norm_old is None or self.weight_norm_new is None:
            return None
        return self.weight_norm_new - self.weight_norm_old

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isfinite(v):
                raise MetricError(f"metric {k} is not finite: {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_norm_gap"] = self.weight_norm_gap
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("weight_norm_gap", None)
        return cls(**d)


def write_report(report: MetricsReport, path) -> None:
    import json

    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


# --- feature retention -------------------------------------------------------------

@dataclass
class ProbeConfig:
    epochs: int = 60
    lr: float = 0.1
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 100
    seed: int = 0


def linear_probe_accuracy(train_feats, train_y, test_feats, test_y, cfg: ProbeConfig | None = None) -> float:
    """Fit a fresh linear head on frozen features (SGD, cosine decay) and return test accuracy."""
    import torch

    cfg = cfg or ProbeConfig()
    xtr = torch.as_tensor(np.asarray(train_feats), dtype=torch.float32)
    ytr = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    xte = torch.as_tensor(np.asarray(test_feats), dtype=torch.float32)
    yte = np.asarray(test_y)
    n_cls = int(max(ytr.max().item(), yte.max())) + 1
    gen = torch.Generator().manual_seed(cfg.seed)
    head = torch.nn.Linear(xtr.shape[1], n_cls)
    bound = 1 / math.sqrt(xtr.shape[1])
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.uniform_(-bound, bound, generator=gen)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_min + (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs)) / 2
        for g in opt.param_groups:
            g["lr"] = lr
        perm = torch.randperm(len(xtr), generator=gen)
        for i in range(0, len(xtr), cfg.batch_size):
            sel = perm[i : i + cfg.batch_size]
            loss = torch.nn.functional.cross_entropy(head(xtr[sel]), ytr[sel])
            if not torch.isfinite(loss):
                raise MetricError(f"linear probe diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = head(xte).argmax(1).numpy()
    return float(100 * np.mean(pred == yte))


def feature_retention(extract, train, test, joint_model_accuracy: float, cfg: ProbeConfig | None = None) -> float:
    """Joint-model accuracy minus the accuracy of a linear head refit on the frozen extractor.

    ``extract`` maps an input array to feature vectors; ``train``/``test`` are
    ``(inputs, labels)`` pairs covering every class.
    """
    probe = linear_probe_accuracy(extract(train[0]), train[1], extract(test[0]), test[1], cfg)
    return float(joint_model_accuracy) - probe
