"""Fixed-capacity exemplar memory.

Exemplars are stored as indices into the training set; replay fetches the raw
inputs and pushes them through the current model.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np


class ExemplarError(ValueError):
    pass


@dataclass
class ExemplarMemory:
    capacity: int
    sets: dict[int, list[int]] = field(default_factory=dict)
    per_class: int = 0

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.sets.values())

    def __len__(self) -> int:
        return self.total

    def __bool__(self) -> bool:
        return self.total > 0

    def classes(self) -> list[int]:
        return list(self.sets)

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "per_class": self.per_class,
            "sets": {str(k): list(map(int, v)) for k, v in self.sets.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExemplarMemory":
        return cls(d["capacity"], {int(k): list(v) for k, v in d["sets"].items()}, d.get("per_class", 0))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def per_class_budget(capacity: int, num_seen: int) -> int:
    if num_seen < 1:
        raise ExemplarError("no classes seen")
    m = capacity // num_seen
    if m < 1:
        raise ExemplarError(f"capacity {capacity} cannot hold one exemplar for each of {num_seen} classes")
    return m


def update_exemplar_sets(
    new_class_data: Mapping[int, np.ndarray],
    memory: ExemplarMemory,
    m: int,
    features: Callable[[np.ndarray], np.ndarray],
    seed: int,
    normalize: bool = False,
) -> ExemplarMemory:
    """Trim old sets to their first ``m`` entries, then add ``m`` random exemplars per new class.

    ``new_class_data`` maps class ID -> candidate sample indices. ``features``
    maps sample indices to feature vectors under the pre-step model. New sets
    are ordered by ascending Euclidean distance to their own feature mean, ties
    broken by sample index; that order decides which exemplars are dropped
    first at later truncations.
    """
    if m < 1:
        raise ExemplarError(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    sets = {c: list(v[:m]) for c, v in memory.sets.items()}
    for c, pool in new_class_data.items():
        pool = np.asarray(pool, dtype=np.int64)
        if len(pool) == 0:
            raise ExemplarError(f"class {c} has no samples")
        if len(pool) < m:
            warnings.warn(f"class {c} has {len(pool)} < {m} samples; storing all of them")
            chosen = pool.copy()
        else:
            chosen = rng.choice(pool, size=m, replace=False)
        feats = np.asarray(features(chosen), dtype=np.float64)
        if normalize:
            feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
        dist = np.linalg.norm(feats - feats.mean(axis=0), axis=1)
        order = np.lexsort((chosen, dist))
        sets[int(c)] = [int(i) for i in chosen[order]]
    return ExemplarMemory(memory.capacity, sets, m)


def exemplar_batches(
    memory: ExemplarMemory, batch_size: int, seed: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled pass over every stored exemplar, as (indices, class IDs) batches."""
    idx = np.array([i for v in memory.sets.values() for i in v], dtype=np.int64)
    labels = np.array([c for c, v in memory.sets.items() for _ in v], dtype=np.int64)
    if len(idx) == 0:
        return
    perm = np.random.default_rng(seed).permutation(len(idx))
    for start in range(0, len(idx), batch_size):
        sel = perm[start : start + batch_size]
        yield idx[sel], labels[sel]


def cycle_exemplar_batches(memory: ExemplarMemory, batch_size: int, seed: int):
    """Endless exemplar stream; each exhausted pass restarts with a fresh shuffle."""
    epoch = 0
    while memory:
        yield from exemplar_batches(memory, batch_size, seed + epoch)
        epoch += 1
