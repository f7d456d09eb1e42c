import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from classil.memory import (
    ExemplarError,
    ExemplarMemory,
    cycle_exemplar_batches,
    exemplar_batches,
    per_class_budget,
    update_exemplar_sets,
)

import oracles


def _identity_features(table):
    return lambda idx: table[np.asarray(idx)]


def test_budget_is_integer_division():
    assert per_class_budget(2000, 100) == 20
    assert per_class_budget(2000, 60) == 33
    with pytest.raises(ExemplarError):
        per_class_budget(10, 11)
    with pytest.raises(ExemplarError):
        per_class_budget(10, 0)


def test_old_sets_are_truncated_to_a_prefix():
    mem = ExemplarMemory(100, {7: [10, 11, 12, 13, 14]}, 5)
    out = update_exemplar_sets({}, mem, 2, _identity_features(np.zeros((20, 2))), seed=0)
    assert out.sets[7] == [10, 11]
    assert mem.sets[7] == [10, 11, 12, 13, 14]  # input left untouched


def test_new_set_sorted_by_distance_to_mean():
    # three points whose distances to their mean are 2.0, 0.5, 1.0
    feats = np.array([[2.0, 0.0], [-0.5, 0.0], [-1.5, 0.0]])
    assert np.allclose(feats.mean(0), 0)
    out = update_exemplar_sets({0: np.array([0, 1, 2])}, ExemplarMemory(10), 3, _identity_features(feats), seed=0)
    assert out.sets[0] == [1, 2, 0]
    assert out.sets[0] == oracles.sorted_by_distance(feats.tolist(), [0, 1, 2])


def test_distance_ties_break_by_sample_index():
    feats = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    out = update_exemplar_sets({0: np.array([3, 0, 2, 1])}, ExemplarMemory(10), 4, _identity_features(feats), seed=0)
    assert out.sets[0] == [0, 1, 2, 3]


def test_selection_is_seeded_random_subset():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(200, 3))
    pool = {0: np.arange(100), 1: np.arange(100, 200)}
    a = update_exemplar_sets(pool, ExemplarMemory(20), 10, _identity_features(feats), seed=5)
    b = update_exemplar_sets(pool, ExemplarMemory(20), 10, _identity_features(feats), seed=5)
    c = update_exemplar_sets(pool, ExemplarMemory(20), 10, _identity_features(feats), seed=6)
    assert a.sets == b.sets
    assert a.sets != c.sets
    # which samples are chosen does not depend on the features, only on the seed
    other = update_exemplar_sets(pool, ExemplarMemory(20), 10, _identity_features(-3 * feats), seed=5)
    assert {k: set(v) for k, v in other.sets.items()} == {k: set(v) for k, v in a.sets.items()}


def test_selection_matches_seeded_choice():
    feats = np.random.default_rng(1).normal(size=(50, 2))
    out = update_exemplar_sets({4: np.arange(50)}, ExemplarMemory(8), 8, _identity_features(feats), seed=11)
    chosen = np.random.default_rng(11).choice(np.arange(50), size=8, replace=False)
    assert set(out.sets[4]) == set(chosen.tolist())


def test_small_class_keeps_everything_with_warning():
    feats = np.zeros((3, 2))
    with pytest.warns(UserWarning, match="storing all"):
        out = update_exemplar_sets({0: np.arange(3)}, ExemplarMemory(50), 5, _identity_features(feats), seed=0)
    assert sorted(out.sets[0]) == [0, 1, 2]


def test_empty_class_is_an_error():
    with pytest.raises(ExemplarError):
        update_exemplar_sets({0: np.array([], dtype=int)}, ExemplarMemory(5), 2, _identity_features(np.zeros((1, 1))), 0)


def test_sampler_covers_each_exemplar_once_per_epoch():
    mem = ExemplarMemory(200, {c: list(range(c * 20, c * 20 + 20)) for c in range(10)}, 20)
    batches = list(exemplar_batches(mem, 100, seed=0))
    assert len(batches) == 2
    idx = np.concatenate([b[0] for b in batches])
    assert sorted(idx.tolist()) == list(range(200))
    labels = np.concatenate([b[1] for b in batches])
    assert Counter(labels.tolist()) == {c: 20 for c in range(10)}
    for i, c in zip(idx, labels):
        assert i // 20 == c


def test_sampler_on_empty_memory_yields_nothing():
    assert list(exemplar_batches(ExemplarMemory(10), 4, 0)) == []
    assert list(cycle_exemplar_batches(ExemplarMemory(10), 4, 0)) == []


def test_cycling_sampler_restarts_with_new_shuffle():
    mem = ExemplarMemory(6, {0: [0, 1, 2], 1: [3, 4, 5]}, 3)
    it = cycle_exemplar_batches(mem, 4, seed=0)
    first = [next(it) for _ in range(2)]
    second = [next(it) for _ in range(2)]
    assert sorted(np.concatenate([b[0] for b in first]).tolist()) == list(range(6))
    assert sorted(np.concatenate([b[0] for b in second]).tolist()) == list(range(6))


def test_memory_round_trip(tmp_path):
    mem = ExemplarMemory(10, {3: [1, 2], 5: [7, 8]}, 2)
    assert ExemplarMemory.from_dict(mem.to_dict()) == mem
    mem.dump(tmp_path / "m.json")
    import json

    assert ExemplarMemory.from_dict(json.loads((tmp_path / "m.json").read_text())) == mem


@given(
    capacity=st.integers(4, 200),
    n_old=st.integers(0, 6),
    n_new=st.integers(1, 6),
    pool_size=st.integers(1, 40),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=150, deadline=None)
def test_update_against_brute_force(capacity, n_old, n_new, pool_size, seed):
    t = n_old + n_new
    if capacity // t < 1:
        return
    rng = np.random.default_rng(seed)
    m_old = capacity // max(n_old, 1)
    n_samples = (n_old + n_new) * pool_size
    feats = rng.normal(size=(n_samples, 3)).round(2)  # rounding invites distance ties
    old_sets = {c: list(rng.permutation(np.arange(c * pool_size, (c + 1) * pool_size))[: min(m_old, pool_size)])
                for c in range(n_old)}
    mem = ExemplarMemory(capacity, old_sets, m_old)
    pools = {c: np.arange(c * pool_size, (c + 1) * pool_size) for c in range(n_old, t)}
    m = per_class_budget(capacity, t)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = update_exemplar_sets(pools, mem, m, _identity_features(feats), seed)

    assert out.total <= capacity
    assert set(out.sets) == set(range(t))
    for c in range(n_old):
        assert out.sets[c] == old_sets[c][:m]
    for c in range(n_old, t):
        chosen = out.sets[c]
        assert len(chosen) == min(m, pool_size)
        assert set(chosen) <= set(pools[c].tolist())
        pts = [list(feats[i]) for i in chosen]
        assert oracles.respects_distance_order(pts, chosen)
    sizes = {len(v) for v in out.sets.values()}
    if pool_size >= m:
        assert sizes == {m}
