import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtray import _kernels
from dualtray.nominal import (
    NX,
    T_S,
    FeatureResidual,
    NominalParams,
    from_plant,
    nominal_accel,
    param_vector,
    phi,
    phi_jacobians,
)
from dualtray.plant import G, ObjectConfig, ObjectState, Shape, TiltCommand, TrayState, step_plant

GRAVITY_ONLY = NominalParams(nominal_friction=False)


def random_state(rng):
    return np.concatenate(
        [
            rng.uniform(-0.2, 0.2, 2),
            rng.uniform(-0.3, 0.3, 2),
            rng.uniform(-0.6, 0.6, 2),
            rng.uniform(-2.0, 2.0, 2),
        ]
    )


def fd_jacobians(s, u, residual, params, h=1e-6):
    A = np.zeros((NX, NX))
    B = np.zeros((NX, 2))
    for j in range(NX):
        e = np.zeros(NX)
        e[j] = h
        A[:, j] = (phi(s + e, u, residual, params) - phi(s - e, u, residual, params)) / (2 * h)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        B[:, j] = (phi(s, u + e, residual, params) - phi(s, u - e, residual, params)) / (2 * h)
    return A, B


def assert_rel(a, b, rtol=1e-4, atol=1e-8):
    assert np.all(np.abs(a - b) <= rtol * np.abs(b) + atol), np.max(np.abs(a - b))


# nominal acceleration examples


def test_accel_at_rest_level():
    assert np.array_equal(nominal_accel(np.zeros(NX), None, NominalParams()), [0.0, 0.0])


def test_accel_gravity_only_at_rest():
    s = np.zeros(NX)
    s[5] = 0.2
    a = nominal_accel(s, None, NominalParams())
    assert a[0] == pytest.approx(-G * math.sin(0.2), abs=1e-12)


def test_accel_friction_saturates():
    s = np.zeros(NX)
    s[2] = 1.0
    a = nominal_accel(s, None, NominalParams(mu_hat=0.1))
    assert a[0] == pytest.approx(-0.1 * G, rel=1e-9)


def test_friction_opposes_slip_direction():
    s = np.zeros(NX)
    s[2], s[3] = 0.3, -0.4
    a = nominal_accel(s, None, NominalParams(mu_hat=0.1))
    assert np.allclose(a, -0.1 * G * np.array([0.6, -0.8]), rtol=1e-9)


def test_params_validation():
    with pytest.raises(ValueError):
        NominalParams(mass_hat=0.0)
    with pytest.raises(ValueError):
        NominalParams(epsilon=-1.0)


# phi examples


def test_phi_fixed_point():
    s = np.zeros(NX)
    assert np.array_equal(phi(s, np.zeros(2)), s)


def test_phi_first_step_from_tilt():
    s = np.zeros(NX)
    s[5] = 0.1
    # gravity-only reading of the nominal model
    out = phi(s, np.array([0.0, 0.1]), None, GRAVITY_ONLY)
    assert out[2] == pytest.approx(-G * math.sin(0.1) * T_S, abs=1e-6)
    # smoothed friction can only slow the object down
    with_friction = phi(s, np.array([0.0, 0.1]))
    assert out[2] < with_friction[2] < 0.0


def test_phi_residual_shift():
    s = np.zeros(NX)
    s[2] = 0.05
    c = 0.7
    r = np.array([c, 0, 0, 0, 0, 0])
    d = phi(s, np.zeros(2), r, GRAVITY_ONLY) - phi(s, np.zeros(2), None, GRAVITY_ONLY)
    assert d[2] == pytest.approx(c * T_S, abs=1e-9)


# The residual enters additively; exact linearity needs velocity dynamics
# that are linear in v, i.e. the friction-free nominal reading.
@given(st.integers(0, 2**31 - 1))
def test_residual_linearity(seed):
    rng = np.random.default_rng(seed)
    s, u = random_state(rng), rng.uniform(-0.6, 0.6, 2)
    r1, r2 = np.zeros(6), np.zeros(6)
    r1[:2], r2[:2] = rng.normal(size=2), rng.normal(size=2)
    lhs = phi(s, u, r1 + r2, GRAVITY_ONLY) - phi(s, u, r2, GRAVITY_ONLY)
    rhs = phi(s, u, r1, GRAVITY_ONLY) - phi(s, u, np.zeros(6), GRAVITY_ONLY)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_consistency_with_plant_sliding_cube():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.10)
    params = NominalParams.matched(cfg)
    obj = ObjectState.at_rest(cfg)
    obj.v = np.array([0.2, -0.1, 0.0])
    obj.stuck = False
    tray = TrayState(tilt=[0.05, -0.1])
    u = np.array([0.05, -0.1])
    for _ in range(20):
        x = from_plant(obj, tray)
        pred = phi(x, u, None, params)
        obj, tray, _ = step_plant(obj, tray, TiltCommand(*u), T_S, cfg)
        meas = from_plant(obj, tray)
        dv_pred, dv_meas = pred[2:4] - x[2:4], meas[2:4] - x[2:4]
        assert np.linalg.norm(dv_pred - dv_meas) <= 0.01 * np.linalg.norm(dv_meas)


# Jacobians


def test_position_velocity_block_at_rest():
    A, B, _ = phi_jacobians(np.zeros(NX), np.zeros(2), None, GRAVITY_ONLY)
    assert np.allclose(A[0:2, 2:4], T_S * np.eye(2), atol=1e-8)


def test_command_enters_through_tilt():
    A, B, _ = phi_jacobians(np.zeros(NX), np.zeros(2))
    # position rows see u only through two integrations of the servo (O(dt^4))
    assert np.max(np.abs(B[0:2])) < 1e-6
    assert np.max(np.abs(B[4:8])) > 1e-3


def test_jacobians_vs_finite_differences():
    rng = np.random.default_rng(7)
    params = NominalParams(mu_s_hat=0.12, viscous_hat=0.3)
    res = FeatureResidual(bias=(0.1, -0.2), zx=(0.3, 0.05, 0.01), zy=(-0.2, 0.02, 0.0))
    for _ in range(100):
        s, u = random_state(rng), rng.uniform(-0.6, 0.6, 2)
        A, B, val = phi_jacobians(s, u, res, params)
        Af, Bf = fd_jacobians(s, u, res, params)
        assert np.allclose(val, phi(s, u, res, params), atol=1e-15)
        assert_rel(A, Af)
        assert_rel(B, Bf)


def test_batched_jacobians_match_single():
    rng = np.random.default_rng(1)
    S = np.stack([random_state(rng) for _ in range(5)])
    U = rng.uniform(-0.6, 0.6, (5, 2))
    A, B, _ = phi_jacobians(S, U)
    for k in range(5):
        a, b, _ = phi_jacobians(S[k], U[k])
        assert np.allclose(A[k], a, atol=1e-15) and np.allclose(B[k], b, atol=1e-15)


@pytest.mark.parametrize("shape", list(Shape))
def test_compiled_kernel_matches_dual_numbers(shape):
    rng = np.random.default_rng(3)
    params = NominalParams.matched(ObjectConfig.from_mu(shape, 2.0, 0.05))
    res = FeatureResidual(bias=(0.05, 0.0), zx=(0.1, -0.02, 0.01), zy=(0.0, 0.03, -0.01))
    p, rv = param_vector(params), res.vector()
    out, A, B = np.empty(NX), np.empty((NX, NX)), np.empty((NX, 2))
    for _ in range(20):
        s, u = random_state(rng), rng.uniform(-0.6, 0.6, 2)
        _kernels.step_jac(s, u, p, rv, T_S, out, A, B)
        Ad, Bd, val = phi_jacobians(s, u, res, params)
        assert np.allclose(out, val, rtol=0, atol=1e-14)
        assert np.allclose(_kernels.step(s, u, p, rv, T_S), val, rtol=0, atol=1e-14)
        assert np.allclose(A, Ad, atol=1e-12) and np.allclose(B, Bd, atol=1e-12)


@settings(max_examples=50)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_phi_smooth_across_zero_velocity(v1, v2):
    # no branch on velocity sign: tiny velocity changes give tiny state changes
    s = np.zeros(NX)
    s[2], s[3] = 1e-9 * v1, 1e-9 * v2
    d = phi(s, np.zeros(2)) - phi(np.zeros(NX), np.zeros(2))
    assert np.max(np.abs(d)) < 1e-8
