import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualtray.metrics import control_effort, settling_time, steady_state_error, steady_state_error_squared, tail_start

RATE = 500.0


def test_tail_index():
    # 1-based i > 0.8 n
    assert tail_start(10000) == 8000
    assert tail_start(5) == 4
    assert tail_start(7) == 5  # i = 6, 7 satisfy i > 5.6


def test_steady_state_error_trivial():
    assert steady_state_error(np.full(100, 0.003)) == pytest.approx(0.003, abs=1e-18)
    assert steady_state_error(np.zeros(100)) == 0.0
    vec = np.tile([0.003, 0.004], (100, 1))
    assert steady_state_error(vec) == pytest.approx(0.005, abs=1e-15)
    with pytest.raises(ValueError):
        steady_state_error([])


def test_steady_state_error_exponential_vs_quadrature():
    tau, e0 = 1.0, 0.1
    t = np.arange(1, 10001) / RATE  # 20 s
    e = e0 * np.exp(-t / tau)
    exact = (tau / 4) * (math.exp(-16 / tau) - math.exp(-20 / tau)) * e0
    # right Riemann sum of a decaying exponential: relative bias ~ dt / (2 tau)
    assert steady_state_error(e) == pytest.approx(exact, rel=2e-3)


def test_squared_variant():
    e = np.full(50, 0.02)
    assert steady_state_error_squared(e) == pytest.approx(4e-4, abs=1e-18)


def test_settling_examples():
    assert settling_time(np.full(1000, 0.01), 0.01, RATE) == 0.0
    t = np.arange(10000) / RATE
    c = 0.002
    e = c + 0.1 * np.exp(-t)
    ess = steady_state_error(e)
    first = int(np.argmax(e <= 1.01 * ess))
    assert settling_time(e, ess, RATE) == first / RATE
    e2 = e.copy()
    e2[-1] = 1.0
    assert settling_time(e2, ess, RATE, 20.0) == 20.0


@given(st.lists(st.floats(0, 1), min_size=5, max_size=200))
def test_settling_within_duration(errs):
    e = np.asarray(errs)
    ess = steady_state_error(e)
    ts = settling_time(e, ess, RATE)
    assert 0.0 <= ts <= len(e) / RATE and ess >= 0.0


@given(st.permutations(list(range(10))))
def test_tail_mean_permutation_invariant_inside_tail(perm):
    e = np.concatenate([np.ones(40), 0.1 * np.arange(10.0)])
    e2 = e.copy()
    e2[40:] = e[40:][list(perm)]
    assert steady_state_error(e2) == pytest.approx(steady_state_error(e), abs=1e-15)


def test_control_effort_examples():
    dt = 0.002
    assert control_effort(np.zeros((100, 2)), dt) == 0.0
    tau = np.tile([2.0, 0.0], (5000, 1))  # |tau|^2 = 4 over 10 s
    assert control_effort(tau, dt, 1.0, 123.0) == pytest.approx(40.0, rel=1e-12)
    step = np.zeros((10, 1))
    step[5:] = 0.3
    assert control_effort(step, dt, 0.0, 2.0) == pytest.approx(2.0 * (0.3 / dt) ** 2, rel=1e-12)
