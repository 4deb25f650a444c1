import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtray.qp import QpInfeasible, box_constraints, kkt_residual, solve


def random_instance(rng, n, m_extra=0):
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 5.0
    lo, hi = -rng.uniform(0.1, 1.0, n), rng.uniform(0.1, 1.0, n)
    A, b = box_constraints(lo, hi)
    if m_extra:
        C = rng.normal(size=(m_extra, n))
        A = np.vstack([A, C])
        b = np.concatenate([b, np.abs(rng.normal(size=m_extra)) + 0.05])
    return H, g, A, b


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(0, 6))
def test_kkt_on_random_instances(seed, n, m):
    rng = np.random.default_rng(seed)
    H, g, A, b = random_instance(rng, n, m)
    res = solve(H, g, A, b, np.zeros(n))
    assert res.converged
    assert res.kkt_residual < 1e-8
    assert np.all(A @ res.x - b <= 1e-9)


def test_unconstrained_optimum_inside_box():
    H = np.diag([2.0, 4.0])
    g = np.array([-1.0, 2.0])
    A, b = box_constraints(np.full(2, -10.0), np.full(2, 10.0))
    res = solve(H, g, A, b, np.zeros(2))
    assert np.allclose(res.x, [0.5, -0.5], atol=1e-14)
    assert res.active == []


def test_forced_active_bound_multiplier():
    # minimise 0.5 (x - 3)^2 with x <= 1: x = 1, multiplier 2
    H = np.eye(1)
    g = np.array([-3.0])
    A, b = box_constraints(np.array([-5.0]), np.array([1.0]))
    res = solve(H, g, A, b, np.zeros(1))
    assert res.x[0] == pytest.approx(1.0, abs=1e-14)
    assert res.multipliers[0] == pytest.approx(2.0, abs=1e-12)
    assert res.kkt_residual < 1e-12


def test_all_bounds_active():
    rng = np.random.default_rng(0)
    n = 6
    H = np.eye(n)
    g = -100.0 * np.sign(rng.normal(size=n))
    A, b = box_constraints(-np.ones(n), np.ones(n))
    res = solve(H, g, A, b, np.zeros(n))
    assert np.allclose(np.abs(res.x), 1.0)
    assert len(res.active) == n
    assert res.kkt_residual < 1e-10


def test_warm_start_working_set_same_solution():
    rng = np.random.default_rng(4)
    H, g, A, b = random_instance(rng, 8, 3)
    cold = solve(H, g, A, b, np.zeros(8))
    warm = solve(H, g, A, b, np.zeros(8), working=cold.active)
    assert np.allclose(cold.x, warm.x, atol=1e-10)


def test_infeasible_start_rejected():
    A, b = box_constraints(np.zeros(1), np.ones(1))
    with pytest.raises(QpInfeasible):
        solve(np.eye(1), np.zeros(1), A, b, np.array([2.0]))


def test_indefinite_hessian_rejected():
    A, b = box_constraints(-np.ones(2), np.ones(2))
    with pytest.raises(ValueError):
        solve(np.diag([1.0, -1.0]), np.zeros(2), A, b, np.zeros(2))


def test_kkt_residual_detects_wrong_point():
    H, g = np.eye(2), np.array([-1.0, 0.0])
    A, b = box_constraints(-np.ones(2), np.ones(2))
    assert kkt_residual(H, g, A, b, np.zeros(2), np.zeros(4)) == pytest.approx(1.0)
