import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from llmimage.algebra import (SingularSpectrum, alr, alr_inverse, clamp_probabilities, clr,
                              clr_from_logprobs, clr_vector, column_space, leverage_scores,
                              log_softmax, lstsq_residual, numerical_rank, pivot_rows,
                              prob_vector, singular_spectrum, softmax, solve_image_coordinates)
from llmimage.errors import DomainError, ShapeMismatch, SingularSystem

LN = np.log([1.0, 2.0, 3.0])

logit_arrays = arrays(np.float64, st.integers(2, 60),
                      elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False))


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax(LN), [1 / 6, 1 / 3, 1 / 2], rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([0, 0, 0]) + 123.4), [1 / 3] * 3, atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DomainError):
        softmax([0.0, np.inf])


def test_clr_examples():
    np.testing.assert_allclose(clr([1 / 3] * 3), 0.0, atol=1e-15)
    np.testing.assert_allclose(clr([1 / 6, 1 / 3, 1 / 2]), LN - LN.mean(), atol=1e-15)
    l = np.array([5.0, 7.0, 9.0])
    np.testing.assert_allclose(clr(softmax(l)), l - l.mean(), atol=1e-13)


def test_alr_examples():
    np.testing.assert_allclose(alr([1 / 3] * 3), [0, 0], atol=1e-15)
    np.testing.assert_allclose(alr([1 / 6, 1 / 3, 1 / 2]), [np.log(2), np.log(3)], atol=1e-15)
    np.testing.assert_allclose(alr_inverse([0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(alr_inverse([np.log(2), np.log(3)]), [1 / 6, 1 / 3, 1 / 2],
                               atol=1e-15)


def test_alr_inverse_large_inputs_match_extended_precision():
    import mpmath
    got = alr_inverse([700.0, 0.0])
    assert np.all(np.isfinite(got))
    mpmath.mp.dps = 50
    z = mpmath.exp(0) + mpmath.exp(700) + mpmath.exp(0)
    want = [float(mpmath.exp(0) / z), float(mpmath.exp(700) / z), float(mpmath.exp(0) / z)]
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=0)


def test_log_ratio_transforms_reject_zeros():
    with pytest.raises(DomainError):
        clr([0.5, 0.5, 0.0])
    with pytest.raises(DomainError):
        alr([0.0, 1.0])


def test_validators():
    assert prob_vector([0.25, 0.75]).flags.writeable is False
    with pytest.raises(DomainError):
        prob_vector([0.5, 0.6])
    with pytest.raises(DomainError):
        prob_vector([1.0, 0.0])
    with pytest.raises(ShapeMismatch):
        prob_vector([1.0])
    with pytest.raises(DomainError):
        clr_vector([1.0, 1.0])


def test_clamp_counts_entries():
    p, n = clamp_probabilities([0.5, 0.0, 1e-320])
    assert n == 2 and p.min() == 1e-300


@settings(max_examples=200, deadline=None)
@given(logit_arrays)
def test_clr_softmax_roundtrip(l):
    p = softmax(l)
    if np.any(p == 0):
        return
    np.testing.assert_allclose(softmax(clr(p)), p, rtol=0, atol=1e-12)
    np.testing.assert_allclose(clr(p), l - l.mean(), rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(logit_arrays)
def test_alr_roundtrip(l):
    p = softmax(l)
    if np.any(p == 0):
        return
    np.testing.assert_allclose(alr_inverse(alr(p)), p, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(logit_arrays, st.floats(-500, 500))
def test_log_softmax_shift_invariant(l, c):
    np.testing.assert_allclose(log_softmax(l + c), log_softmax(l), atol=1e-9)


def test_clr_from_logprobs_matches_clr():
    p = softmax(np.arange(6.0))
    np.testing.assert_allclose(clr_from_logprobs(np.log(p)), clr(p), atol=1e-15)


def test_numerical_rank_examples():
    assert numerical_rank(np.eye(3))[0] == 3
    rng = np.random.default_rng(0)
    M = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 20))
    rank, spectrum = numerical_rank(M, 1e-6)
    assert rank == 8
    assert spectrum.values[8] / spectrum.values[0] < 1e-6
    assert spectrum.largest_log_gap() == 8


def test_numerical_rank_zero_and_tolerance():
    assert numerical_rank(np.zeros((4, 3)))[0] == 0
    with pytest.raises(DomainError):
        numerical_rank(np.eye(2), 0.0)


def test_spectrum_validation():
    with pytest.raises(DomainError):
        SingularSpectrum(np.array([1.0, 2.0]), (2, 2))
    with pytest.raises(ShapeMismatch):
        SingularSpectrum(np.array([1.0]), (2, 2))
    s = singular_spectrum(np.diag([4.0, 2.0, 1e-9]))
    assert s.rank() == 2 and s.rank(1e-10) == 3
    np.testing.assert_allclose(s.relative(), [1, 0.5, 2.5e-10])


def test_singular_spectrum_rejects_bad_input():
    with pytest.raises(ShapeMismatch):
        singular_spectrum(np.ones(3))
    with pytest.raises(DomainError):
        singular_spectrum(np.array([[np.nan]]))


def test_lstsq_residual_examples():
    rng = np.random.default_rng(1)
    L = rng.normal(size=(30, 5))
    assert lstsq_residual(L, L[:, 2]) <= 1e-9
    Q, _ = np.linalg.qr(np.hstack([L, rng.normal(size=(30, 1))]))
    assert lstsq_residual(L, Q[:, 5]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        lstsq_residual(L, np.ones(4))


def test_column_space_orthonormal():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 15))
    B = column_space(M)
    assert B.shape == (40, 6)
    np.testing.assert_allclose(B.T @ B, np.eye(6), atol=1e-12)
    assert lstsq_residual(B, M[:, 3]) < 1e-9 * np.linalg.norm(M[:, 3])


def test_leverage_flags_outlier_column():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(40, 4)) @ rng.normal(size=(4, 30))
    M = np.hstack([M, rng.normal(size=(40, 1))])
    lev = leverage_scores(M)
    assert lev.argmax() == 30 and lev[30] == pytest.approx(1.0, abs=1e-9)


def test_pivot_rows_respects_exclude():
    rng = np.random.default_rng(4)
    B = rng.normal(size=(20, 3))
    rows = pivot_rows(B, 3, exclude=[0, 1, 2])
    assert len(rows) == 3 and not set(rows) & {0, 1, 2}
    assert np.linalg.matrix_rank(B[rows]) == 3
    with pytest.raises(ShapeMismatch):
        pivot_rows(B, 5, exclude=range(17))


def test_solve_image_coordinates_examples():
    np.testing.assert_allclose(solve_image_coordinates([[2.0]], [6.0]), [3.0])
    np.testing.assert_allclose(solve_image_coordinates([[1, 0], [1, 1]], [2, 5]), [2, 3])
    with pytest.raises(SingularSystem) as exc:
        solve_image_coordinates([[1, 1], [1, 1]], [1, 2])
    assert exc.value.condition > 1e12 or not math.isfinite(exc.value.condition)
    with pytest.raises(ShapeMismatch):
        solve_image_coordinates(np.ones((2, 3)), [1, 2])
