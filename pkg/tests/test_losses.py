import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from classil.losses import (
    LogitsSplit,
    LossContractError,
    StepLosses,
    adaptive_lambda,
    combined_softmax_ce,
    inter_task_ce,
    intra_task_ce,
    kd_loss,
    total_loss,
)

import oracles

torch.set_default_dtype(torch.float32)


def _split(values, num_old):
    return LogitsSplit(torch.tensor([values], dtype=torch.float64), num_old)


# --- point values --------------------------------------------------------------

def test_intra_task_uniform_is_log2():
    for label in (2, 3):
        assert intra_task_ce(_split([9.0, -4.0, 0.0, 0.0], 2), torch.tensor([label])).item() == pytest.approx(math.log(2))


def test_intra_task_reference_value():
    v = intra_task_ce(_split([3.0, 2.0, 0.0], 1), torch.tensor([1])).item()
    assert v == pytest.approx(oracles.INTRA_2_0, abs=1e-12)
    assert v == pytest.approx(0.1269, abs=1e-4)


def test_intra_task_shift_invariance():
    a = intra_task_ce(_split([1.0, 0.3, -0.7, 2.2], 1), torch.tensor([2])).item()
    b = intra_task_ce(_split([1.0, 5.3, 4.3, 7.2], 1), torch.tensor([2])).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_intra_task_ignores_old_logits():
    a = intra_task_ce(_split([100.0, -3.0, 0.5, 1.0], 2), torch.tensor([3])).item()
    b = intra_task_ce(_split([-8.0, 40.0, 0.5, 1.0], 2), torch.tensor([3])).item()
    assert a == b


def test_intra_task_rejects_old_label():
    with pytest.raises(LossContractError):
        intra_task_ce(_split([0.0, 0.0, 0.0], 1), torch.tensor([0]))


def test_inter_task_uniform_is_log_t():
    s = LogitsSplit(torch.zeros(1, 100, dtype=torch.float64), 50)
    assert inter_task_ce(s, torch.tensor([73])).item() == pytest.approx(math.log(100))


def test_inter_task_peaked_reference_value():
    logits = [0.0] * 100
    logits[42] = 10.0
    v = inter_task_ce(_split(logits, 50), torch.tensor([42])).item()
    assert v == pytest.approx(oracles.INTER_PEAKED_100, rel=1e-10)
    assert v == pytest.approx(0.00448, abs=1e-5)


def test_inter_task_rejects_unseen_label():
    with pytest.raises(LossContractError):
        inter_task_ce(_split([0.0, 0.0], 1), torch.tensor([2]))


def test_losses_agree_when_nothing_is_old():
    s = _split([0.4, -1.2, 2.0], 0)
    y = torch.tensor([1])
    assert intra_task_ce(s, y).item() == pytest.approx(inter_task_ce(s, y).item(), abs=1e-15)
    assert combined_softmax_ce(s, y).item() == inter_task_ce(s, y).item()


def test_kd_zero_at_equality_and_reference_value():
    x = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
    assert kd_loss(x, x.clone()).item() == pytest.approx(0.0, abs=1e-15)
    v = kd_loss(torch.tensor([[0.0, 1.0]], dtype=torch.float64), torch.tensor([[1.0, 0.0]], dtype=torch.float64)).item()
    assert v == pytest.approx(oracles.KD_10_01, rel=1e-12)


def test_kd_direction_is_teacher_first():
    student = torch.tensor([[0.0, 2.0, -1.0]], dtype=torch.float64)
    teacher = torch.tensor([[1.0, 0.0, 0.5]], dtype=torch.float64)
    assert kd_loss(student, teacher).item() == pytest.approx(oracles.kl(teacher[0].tolist(), student[0].tolist()))
    assert kd_loss(student, teacher).item() != pytest.approx(oracles.kl(student[0].tolist(), teacher[0].tolist()))


def test_kd_temperature():
    s, t = [0.2, 1.5, -0.3], [1.0, -1.0, 0.0]
    v = kd_loss(torch.tensor([s], dtype=torch.float64), torch.tensor([t], dtype=torch.float64), temperature=2.5).item()
    assert v == pytest.approx(oracles.kl(t, s, 2.5), rel=1e-12)


def test_kd_empty_span_and_mismatch():
    assert kd_loss(torch.zeros(3, 0), torch.zeros(3, 0)).item() == 0.0
    with pytest.raises(LossContractError):
        kd_loss(torch.zeros(1, 3), torch.zeros(1, 2))


def test_kd_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 12))
        a = torch.tensor(rng.normal(0, 3, (1, k)))
        b = torch.tensor(rng.normal(0, 3, (1, k)))
        assert kd_loss(a, b).item() >= -1e-12


def test_adaptive_lambda_values():
    assert adaptive_lambda(10, 0, 5.0) == 5.0
    assert adaptive_lambda(10, 50, 5.0) == pytest.approx(oracles.LAMBDA_5_50_10, rel=1e-12)
    assert adaptive_lambda(10, 50, 5.0) == pytest.approx(16.510, abs=1e-3)
    with pytest.raises(LossContractError):
        adaptive_lambda(0, 5, 5.0)
    with pytest.raises(LossContractError):
        adaptive_lambda(1, 5, 0.0)


@given(st.integers(1, 100), st.integers(0, 500), st.floats(0.01, 1000))
def test_adaptive_lambda_never_below_base(c_new, c_old, base):
    assert adaptive_lambda(c_new, c_old, base) >= base * (1 - 1e-12)


def test_total_loss_composition():
    ce_x, ce_p, kd_x, kd_p = (torch.tensor(v) for v in (0.5, 0.25, 0.1, 0.3))
    assert total_loss(ce_x, ce_p, kd_x, kd_p, 2.0).item() == pytest.approx(0.75 + 2 * 0.4)
    z = torch.tensor(0.0)
    assert total_loss(ce_x, z, z, z, 7.0).item() == pytest.approx(0.5)  # base task
    assert total_loss(ce_x, ce_p, z, z, 1e6).item() == pytest.approx(0.75)  # teacher == student
    assert total_loss(ce_x, ce_p, kd_x, kd_p, 0.0).item() == pytest.approx(0.75)  # fine-tuning ablation
    parts = StepLosses(ce_x, kd_x, ce_p, kd_p)
    assert parts.total(2.0).item() == pytest.approx(1.55)
    assert set(parts.as_floats()) == {"ce_new", "kd_new", "ce_exemplar", "kd_exemplar"}


def test_soft_targets_match_hard_targets_for_one_hot():
    s = _split([0.5, 1.0, -0.5, 2.0], 1)
    hard = intra_task_ce(s, torch.tensor([2]))
    soft = intra_task_ce(s, torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64))
    assert hard.item() == pytest.approx(soft.item(), abs=1e-15)


# --- gradients --------------------------------------------------------------------

def assert_grad_matches(fn, x: torch.Tensor, rtol: float = 1e-4):
    err = oracles.gradient_error(fn, x)
    assert err < rtol, f"relative gradient error {err:.2e}"


@st.composite
def loss_instances(draw):
    b = draw(st.integers(2, 5))
    s = draw(st.integers(1, 5))
    n = draw(st.integers(1, 5))
    seed = draw(st.integers(0, 2**31))
    temp = draw(st.sampled_from([1.0, 2.0, 0.5]))
    rng = np.random.default_rng(seed)
    logits = torch.tensor(rng.normal(0, 2, (b, s + n)))
    teacher = torch.tensor(rng.normal(0, 2, (b, s)))
    y_new = torch.tensor(rng.integers(s, s + n, b))
    y_all = torch.tensor(rng.integers(0, s + n, b))
    return logits, teacher, y_new, y_all, s, temp


@given(loss_instances())
@settings(max_examples=120, deadline=None)
def test_gradients_match_finite_differences(inst):
    logits, teacher, y_new, y_all, s, temp = inst
    assert_grad_matches(lambda z: intra_task_ce(LogitsSplit(z, s), y_new), logits)
    assert_grad_matches(lambda z: inter_task_ce(LogitsSplit(z, s), y_all), logits)
    assert_grad_matches(lambda z: kd_loss(LogitsSplit(z, s).old, teacher, temp), logits)
    lam = adaptive_lambda(logits.shape[1] - s, s, 5.0)

    def total(z):
        split = LogitsSplit(z, s)
        half = z.shape[0] // 2  # first half plays the new-data batch, second the exemplar batch
        return total_loss(
            intra_task_ce(LogitsSplit(z[:half], s), y_new[:half]),
            inter_task_ce(LogitsSplit(z[half:], s), y_all[half:]),
            kd_loss(split.old[:half], teacher[:half], temp),
            kd_loss(split.old[half:], teacher[half:], temp),
            lam,
        )

    assert_grad_matches(total, logits)


def _toy_head(num_old=2, num_new=2, dim=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(num_old + num_new, dim, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(num_old + num_new, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(6, dim, generator=g, dtype=torch.float64)
    return w, b, x


def test_separate_softmax_leaves_old_head_rows_untouched():
    w, b, x = _toy_head()
    y = torch.tensor([2, 3, 2, 3, 3, 2])
    loss = intra_task_ce(LogitsSplit(x @ w.T + b, 2), y)
    loss.backward()
    assert torch.equal(w.grad[:2], torch.zeros_like(w.grad[:2]))
    assert torch.equal(b.grad[:2], torch.zeros(2, dtype=torch.float64))
    assert w.grad[2:].abs().sum() > 0


def test_combined_softmax_pushes_old_head_rows():
    w, b, x = _toy_head()
    y = torch.tensor([2, 3, 2, 3, 3, 2])
    combined_softmax_ce(LogitsSplit(x @ w.T + b, 2), y).backward()
    assert w.grad[:2].abs().sum() > 0

    # the same nonzero gradient by finite differences on an old row
    def loss_of_old_row(row):
        w2 = w.detach().clone()
        w2[0] = row
        return combined_softmax_ce(LogitsSplit(x @ w2.T + b.detach(), 2), y)

    numeric = oracles.central_difference(loss_of_old_row, w.detach()[0].clone())
    assert torch.allclose(w.grad[0], numeric, rtol=1e-4, atol=1e-9)
    assert numeric.abs().sum() > 1e-3


def test_separate_softmax_old_rows_by_finite_differences():
    w, b, x = _toy_head(seed=3)
    y = torch.tensor([2, 3, 2, 3, 3, 2])

    def loss_of_old_row(row):
        w2 = w.detach().clone()
        w2[1] = row
        return intra_task_ce(LogitsSplit(x @ w2.T + b.detach(), 2), y)

    numeric = oracles.central_difference(loss_of_old_row, w.detach()[1].clone())
    assert numeric.abs().max() == 0.0
