"""Compositional class-IL losses.

Logit columns are head positions: ``0..s-1`` are old classes, ``s..t-1`` the
classes added at the current step. Targets are either integer head positions
of shape ``[B]`` or soft distributions over the span the loss normalises over
(``[B, t-s]`` for the intra-task loss, ``[B, t]`` for the combined ones).
Every loss is a mean over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class LossContractError(ValueError):
    pass


@dataclass(frozen=True)
class LogitsSplit:
    logits: torch.Tensor  # [B, t]
    num_old: int

    def __post_init__(self):
        if not 0 <= self.num_old <= self.logits.shape[-1]:
            raise LossContractError(f"num_old={self.num_old} outside 0..{self.logits.shape[-1]}")

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]

    @property
    def old(self) -> torch.Tensor:
        return self.logits[..., : self.num_old]

    @property
    def new(self) -> torch.Tensor:
        return self.logits[..., self.num_old :]

    @property
    def old_span(self) -> range:
        return range(0, self.num_old)

    @property
    def new_span(self) -> range:
        return range(self.num_old, self.num_classes)


def _soft_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    if target.dtype in (torch.int64, torch.int32):
        return F.nll_loss(logp, target.long())
    if target.shape != logits.shape:
        raise LossContractError(f"soft target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
    return -(target * logp).sum(-1).mean()


def intra_task_ce(split: LogitsSplit, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy with the softmax restricted to the new-class logits."""
    if target.dtype in (torch.int64, torch.int32):
        if len(target) and (target.min() < split.num_old or target.max() >= split.num_classes):
            raise LossContractError("intra-task target outside the new-class span")
        target = target - split.num_old
    return _soft_ce(split.new, target)


def inter_task_ce(split: LogitsSplit, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy with one softmax over every seen class."""
    if target.dtype in (torch.int64, torch.int32) and len(target):
        if target.min() < 0 or target.max() >= split.num_classes:
            raise LossContractError(f"target outside the {split.num_classes} seen classes")
    return _soft_ce(split.logits, target)


# Same formula, applied to new-class batches in the ablation baseline.
combined_softmax_ce = inter_task_ce


def kd_loss(current_old: torch.Tensor, frozen_old: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """KL(softmax(frozen/T) || softmax(current/T)) over old-class logits, batch mean."""
    if current_old.shape != frozen_old.shape:
        raise LossContractError(f"span mismatch: {tuple(current_old.shape)} vs {tuple(frozen_old.shape)}")
    if current_old.shape[-1] == 0:
        return current_old.new_zeros(())
    log_q = F.log_softmax(current_old / temperature, dim=-1)
    log_p = F.log_softmax(frozen_old.detach() / temperature, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(-1).mean()


def adaptive_lambda(num_new: int, num_old: int, lambda_base: float) -> float:
    if num_new < 1:
        raise LossContractError("adaptive weighting needs at least one new class")
    if num_old < 0 or lambda_base <= 0:
        raise LossContractError(f"invalid num_old={num_old} / lambda_base={lambda_base}")
    return lambda_base * ((num_new + num_old) / num_new) ** (2.0 / 3.0)


@dataclass
class StepLosses:
    ce_new: torch.Tensor
    kd_new: torch.Tensor
    ce_exemplar: torch.Tensor
    kd_exemplar: torch.Tensor

    def total(self, lam: float) -> torch.Tensor:
        return total_loss(self.ce_new, self.ce_exemplar, self.kd_new, self.kd_exemplar, lam)

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def total_loss(ce_new, ce_exemplar, kd_new, kd_exemplar, lam: float) -> torch.Tensor:
    return (ce_new + ce_exemplar) + lam * (kd_new + kd_exemplar)
