import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoad.mathcore import (GradCheckReport, NumericError, grad_check,
                              l2_normalize, l2_normalize_rows, logsumexp,
                              logsumexp_rows, softmax_rows)


def test_logsumexp_single_zero():
    assert logsumexp([0.0]) == 0.0


def test_logsumexp_large_inputs_no_overflow():
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2), abs=1e-9)


def test_logsumexp_oracle_value():
    # log(e^1.8 + e^-0.4 + e^1.0), 40-digit evaluation
    assert logsumexp([1.8, -0.4, 1.0]) == pytest.approx(2.244770511572271, abs=1e-12)


def test_logsumexp_empty_is_error():
    with pytest.raises(NumericError, match="empty reduction"):
        logsumexp([])


def test_logsumexp_rejects_nan():
    with pytest.raises(NumericError):
        logsumexp([1.0, float("nan")])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12),
       st.floats(-100, 100))
def test_logsumexp_shift_invariance(values, c):
    v = np.array(values)
    assert logsumexp(v + c) == pytest.approx(logsumexp(v) + c, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_logsumexp_bounds(values):
    v = np.array(values)
    s = logsumexp(v)
    assert s >= v.max() - 1e-12
    assert s <= v.max() + math.log(len(v)) + 1e-12


def test_logsumexp_rows_matches_scalar():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(5, 7))
    rows = logsumexp_rows(m)
    for i in range(5):
        assert rows[i] == pytest.approx(logsumexp(m[i]), abs=1e-12)


def test_softmax_rows_sums_to_one():
    rng = np.random.default_rng(1)
    p = softmax_rows(rng.normal(size=(6, 9)) * 10)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_l2_normalize_basic():
    assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])


def test_l2_normalize_idempotent():
    u = l2_normalize([1.0, -2.0, 0.5])
    assert np.allclose(l2_normalize(u), u, atol=1e-15)
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_degenerate():
    with pytest.raises(NumericError, match="degenerate vector"):
        l2_normalize([1e-30, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8),
       st.floats(1e-6, 1e6))
def test_l2_normalize_scale_invariant(values, alpha):
    v = np.array(values)
    if alpha * np.linalg.norm(v) < 1e-9:
        return
    assert np.allclose(l2_normalize(alpha * v), l2_normalize(v), atol=1e-9)


def test_l2_normalize_rows_degenerate_row():
    with pytest.raises(NumericError):
        l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_grad_check_quadratic():
    def f(x):
        return float(x[0] ** 2), np.array([2.0 * x[0]])

    report = grad_check(f, np.array([3.0]), h=1e-5)
    assert report.max_rel_error < 1e-8


def test_grad_check_logsumexp():
    rng = np.random.default_rng(42)
    point = rng.normal(size=8)

    def f(x):
        value = logsumexp(x)
        return value, softmax_rows(x[None, :])[0]

    report = grad_check(f, point, h=1e-5)
    assert report.max_rel_error < 1e-6


def test_grad_check_inverse_score_loss_batch():
    # The fine-tuning loss as a function of a 4-score batch.
    from protoad.objective import c_constant, loss_elsa

    C = c_constant(100, 0.5)
    semi = np.array([-1, 0, 1, 0])
    point = np.array([3.0, 4.5, 5.0, 2.2])

    def f(s):
        breakdown, grad = loss_elsa(s, semi, C)
        return breakdown.total, grad

    report = grad_check(f, point, h=1e-5)
    assert report.max_rel_error < 1e-5


def test_grad_check_detects_wrong_gradient():
    def f(x):
        return float(np.sin(x[0])), np.array([np.cos(x[0]) + 0.1])

    report = grad_check(f, np.array([0.3]), h=1e-5)
    assert report.max_rel_error > 1e-3


def test_grad_check_report_invariant():
    with pytest.raises(ValueError):
        GradCheckReport(max_rel_error=-1.0, argmax_coordinate=0,
                        analytic=0.0, numeric=0.0)


def test_grad_check_nonfinite_evaluation():
    def f(x):
        if x[0] > 1.0:
            return float("inf"), np.array([0.0])
        return float(x[0]), np.array([1.0])

    with pytest.raises(NumericError):
        grad_check(f, np.array([1.0]), h=1e-1)
