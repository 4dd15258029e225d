import numpy as np
import pytest

from chexplore import oracle
from chexplore.errors import InvalidArgumentError, SizeGuardError


def test_jacobi_eigh_recovers_decomposition():
    a = np.random.default_rng(0).standard_normal((6, 6))
    a = a + a.T
    lam, v = oracle.jacobi_eigh(a)
    assert np.allclose(v @ np.diag(lam) @ v.T, a, atol=1e-12)
    assert np.allclose(v.T @ v, np.eye(6), atol=1e-12)
    assert np.all(np.diff(lam) <= 0)


def test_full_svd_of_wide_matrix():
    w = np.random.default_rng(1).standard_normal((3, 5))
    u, s, v = oracle.full_svd(w)
    r = oracle.oracle_rank(s)
    assert r == 3 and v.shape == (5, 5)
    assert np.allclose(u[:, :r] @ np.diag(s[:r]) @ v[:, :r].T, w, atol=1e-10)


def test_brute_force_rank_two():
    w = np.array([[1.0, 2.0, 3.0, 1.0], [0.0, 1.0, 1.0, 2.0]])
    assert oracle.brute_force_css(w, 2).best_error == pytest.approx(0.0, abs=1e-10)


def test_brute_force_full_selection():
    w = np.random.default_rng(2).standard_normal((3, 4))
    res = oracle.brute_force_css(w, 4)
    assert res.best_subset == (0, 1, 2, 3) and res.best_error == pytest.approx(0.0, abs=1e-10)


def test_brute_force_enumerates_every_subset():
    w = np.random.default_rng(3).standard_normal((4, 6))
    res = oracle.brute_force_css(w, 2)
    assert len(res.all_errors) == 15
    assert res.best_error == min(res.all_errors.values())


def test_brute_force_size_guard():
    with pytest.raises(SizeGuardError):
        oracle.brute_force_css(np.ones((2, 13)), 2)
    with pytest.raises(InvalidArgumentError):
        oracle.brute_force_css(np.ones((2, 3)), 0)


def test_finite_diff_quadratic_and_constant():
    x = np.array([3.0])
    assert oracle.finite_diff_grad(lambda: float(x[0] ** 2), x, 1e-5)[0] == pytest.approx(6.0, abs=1e-6)
    assert abs(oracle.finite_diff_grad(lambda: 4.0, x, 1e-5)[0]) <= 1e-9
    assert x[0] == 3.0


def test_finite_diff_step_bounds():
    with pytest.raises(InvalidArgumentError):
        oracle.finite_diff_grad(lambda: 0.0, np.zeros(1), 1e-2)


def test_frequency_test_fair_coin():
    rng = np.random.default_rng(0)
    res = oracle.frequency_test(lambda: int(rng.random() < 0.5), [0.5, 0.5], 100_000)
    assert res.tv_distance <= 0.01


def test_frequency_test_degenerate():
    res = oracle.frequency_test(lambda: 0, [1.0], 10_000)
    assert res.tv_distance == 0.0 and res.chi_square_stat == 0.0


def test_frequency_test_needs_enough_trials():
    with pytest.raises(InvalidArgumentError):
        oracle.frequency_test(lambda: 0, [1.0], 100)


def test_frequency_test_impossible_outcome_is_infinite_chi_square():
    res = oracle.frequency_test(lambda: 1, [1.0, 0.0], 10_000)
    assert res.chi_square_stat == np.inf and res.tv_distance == 1.0


def test_run_suite_passes():
    checks = oracle.run_suite()
    assert checks and all(c.passed for c in checks), [c for c in checks if not c.passed]
