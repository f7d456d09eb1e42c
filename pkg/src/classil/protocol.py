"""Class ordering, task partitioning and per-step data visibility."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset


class ScheduleError(ValueError):
    pass


def fisher_yates(n: int, seed: int) -> list[int]:
    """Shuffle ``range(n)`` with a Fisher-Yates pass driven by numpy's PCG64.

    PCG64 output is specified independently of platform, so the order for a
    given seed is reproducible anywhere numpy runs.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


@dataclass(frozen=True)
class ClassTaskSchedule:
    class_order: tuple[int, ...]
    base_count: int
    task_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.class_order)) != len(self.class_order):
            raise ScheduleError("class order contains duplicates")
        if self.base_count + sum(self.task_sizes) != len(self.class_order):
            raise ScheduleError("task sizes do not cover the class order")
        if len(set(self.task_sizes)) > 1:
            raise ScheduleError(f"incremental tasks have unequal sizes {self.task_sizes}")

    @property
    def num_tasks(self) -> int:
        return len(self.task_sizes)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    @property
    def sizes(self) -> list[int]:
        """Class counts of every task, base task first."""
        return [self.base_count, *self.task_sizes]

    def task_classes(self, step: int) -> tuple[int, ...]:
        self._check(step)
        start = self.base_count + sum(self.task_sizes[: step - 1]) if step else 0
        return self.class_order[start : start + self.sizes[step]]

    def seen_classes(self, step: int) -> tuple[int, ...]:
        self._check(step)
        return self.class_order[: sum(self.sizes[: step + 1])]

    def _check(self, step: int):
        if not 0 <= step <= self.num_tasks:
            raise ScheduleError(f"step {step} outside 0..{self.num_tasks}")

    def to_dict(self) -> dict:
        return {
            "class_order": list(self.class_order),
            "base_count": self.base_count,
            "task_sizes": list(self.task_sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTaskSchedule":
        return cls(tuple(d["class_order"]), d["base_count"], tuple(d["task_sizes"]))


def build_schedule(total_classes: int, base_count: int, num_tasks: int, seed: int) -> ClassTaskSchedule:
    if seed < 0:
        raise ScheduleError(f"seed must be non-negative, got {seed}")
    if not 0 < base_count <= total_classes:
        raise ScheduleError(f"base_count={base_count} invalid for {total_classes} classes")
    remaining = total_classes - base_count
    if num_tasks == 0:
        if remaining:
            raise ScheduleError(f"{remaining} classes left over with num_tasks=0")
        sizes: tuple[int, ...] = ()
    elif num_tasks < 0 or remaining % num_tasks:
        raise ScheduleError(
            f"remaining classes ({total_classes} - {base_count} = {remaining}) "
            f"not divisible by num_tasks={num_tasks}"
        )
    else:
        sizes = (remaining // num_tasks,) * num_tasks
    return ClassTaskSchedule(tuple(fisher_yates(total_classes, seed)), base_count, sizes)


@dataclass(frozen=True)
class TaskView:
    step: int
    new_class_data: LabeledDataset
    new_class_indices: np.ndarray  # positions in the source dataset
    old_class_ids: tuple[int, ...]
    new_class_ids: tuple[int, ...]

    @property
    def seen_class_ids(self) -> tuple[int, ...]:
        return self.old_class_ids + self.new_class_ids


def task_view(schedule: ClassTaskSchedule, step: int, dataset: LabeledDataset) -> TaskView:
    """Full data for the classes introduced at ``step``; older classes only by ID."""
    new = schedule.task_classes(step)
    seen = schedule.seen_classes(step)
    idx = dataset.indices_of(new)
    return TaskView(step, dataset.subset(idx), idx, seen[: len(seen) - len(new)], new)
