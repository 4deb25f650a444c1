import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualtray.plant import (
    G,
    EventKind,
    Frame,
    NotInContact,
    ObjectConfig,
    ObjectState,
    Shape,
    TiltCommand,
    TrayState,
    advance_object,
    can_stick,
    contact_accel,
    gravity_in_tray,
    mechanical_energy,
    off_tray,
    servo_step,
    step_plant,
    stribeck_coefficient,
    transform_state,
)

angles = st.floats(-0.6, 0.6)


def sliding(cfg, v, tilt):
    s = ObjectState.at_rest(cfg)
    s.v = np.array([v[0], v[1], 0.0])
    s.stuck = False
    return contact_accel(s, cfg, tilt)


# gravity and frames


def test_gravity_zero_tilt():
    assert np.allclose(gravity_in_tray((0.0, 0.0)), [0, 0, -9.81], atol=0, rtol=0)


def test_gravity_pitch_example():
    g = gravity_in_tray((0.0, 0.6))
    assert g[0] == pytest.approx(-9.81 * math.sin(0.6), abs=1e-12)
    assert g[1] == pytest.approx(0.0, abs=1e-15)
    assert g[2] == pytest.approx(-9.81 * math.cos(0.6), abs=1e-12)


@given(angles, angles)
def test_gravity_roll_symmetry_and_norm(a, b):
    g1, g2 = gravity_in_tray((a, b)), gravity_in_tray((-a, b))
    assert g1[1] == pytest.approx(-g2[1], abs=1e-12)
    assert g1[2] == pytest.approx(g2[2], abs=1e-12)
    assert np.linalg.norm(g1) == pytest.approx(G, rel=1e-12)
    assert g1[2] < 0


def test_transform_identity_at_zero_tilt():
    s = ObjectState(p=[0.1, -0.05, 0.03], v=[0.2, 0.1, 0.0], frame=Frame.TRAY)
    w = transform_state(s, Frame.WORLD, TrayState())
    assert np.allclose(w.p, s.p, atol=1e-15) and np.allclose(w.v, s.v, atol=1e-15)


def test_transform_world_origin_with_raised_com():
    tray = TrayState(tilt=[0.2, -0.3], com=[0.0, 0.0, 0.5])
    s = ObjectState(p=np.zeros(3), frame=Frame.WORLD)
    t = transform_state(s, Frame.TRAY, tray)
    from dualtray.plant import tray_attitude

    expect = tray_attitude(0.2, -0.3).T @ np.array([0.0, 0.0, -0.5])
    assert np.allclose(t.p, expect, atol=1e-15)


@given(
    st.lists(st.floats(-1, 1), min_size=12, max_size=12),
    angles, angles, st.floats(-2, 2), st.floats(-2, 2),
)
def test_transform_round_trip(vals, a, b, ad, bd):
    s = ObjectState(p=vals[0:3], theta=np.asarray(vals[3:6]) * 0.5, v=vals[6:9], w=vals[9:12], frame=Frame.TRAY)
    tray = TrayState(tilt=[a, b], tilt_rate=[ad, bd], com=[0.1, -0.2, 0.8])
    back = transform_state(transform_state(s, Frame.WORLD, tray), Frame.TRAY, tray)
    for name in ("p", "v", "w", "theta"):
        assert np.allclose(getattr(back, name), getattr(s, name), atol=1e-12)


def test_transform_rejects_same_frame():
    with pytest.raises(ValueError):
        transform_state(ObjectState(), Frame.TRAY, TrayState())


# contact regimes


def test_cube_static_hold():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.10)
    beta = 0.9 * math.atan(cfg.mu_s)
    a = contact_accel(ObjectState.at_rest(cfg), cfg, (0.0, beta))
    assert np.all(a == 0.0)


def test_cube_sliding_closed_form():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.10)
    beta = 0.4
    # moving down-slope (towards -x) far above the Stribeck velocity
    a = sliding(cfg, (-1.0, 0.0), (0.0, beta))
    expect = G * (math.sin(beta) - cfg.mu_c * math.cos(beta))
    assert -a[0] == pytest.approx(expect, rel=1e-9)


def test_sphere_rolling_five_sevenths():
    cfg = ObjectConfig.from_mu(Shape.SPHERE, 1.0, 0.10)
    beta = 0.3
    a = contact_accel(ObjectState.at_rest(cfg), cfg, (0.0, beta))
    assert -a[0] == pytest.approx(5.0 / 7.0 * G * math.sin(beta), rel=1e-12)


def test_cylinder_rolls_along_x_slides_along_y():
    cfg = ObjectConfig.from_mu(Shape.CYLINDER, 1.0, 0.05)
    # rolling without slip needs tan(beta) <= 3 mu_s
    a = contact_accel(ObjectState.at_rest(cfg), cfg, (0.0, 0.1))
    assert -a[0] == pytest.approx(G * math.sin(0.1) / 1.5, rel=1e-12)
    assert can_stick((0.0, 0.1), cfg)
    # the same tilt about x makes it slide along its axis
    assert not can_stick((0.1, 0.0), cfg)


def test_not_in_contact():
    cfg = ObjectConfig()
    with pytest.raises(NotInContact):
        contact_accel(ObjectState.at_rest(cfg), cfg, (0.0, 2.0))


def test_stribeck_limits():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.1)
    assert stribeck_coefficient(0.0, cfg) == pytest.approx(cfg.mu_s)
    assert stribeck_coefficient(10.0, cfg) == pytest.approx(cfg.mu_c)


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectConfig(mu_s=0.05, mu_c=0.1)
    with pytest.raises(ValueError):
        ObjectConfig(mass=0.0)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.sampled_from([-1.0, 1.0]), st.sampled_from([-1.0, 1.0]))
def test_stick_consistency(fa, fb, sa, sb):
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.2)
    a, b = sa * 0.2, sb * 0.15
    if can_stick((a, b), cfg):
        assert can_stick((fa * a, fb * b), cfg)


# stepping


def _run(cfg, u, seconds, dt=0.002, tier="ideal_servo", obj=None):
    obj = obj or ObjectState.at_rest(cfg)
    tray = TrayState()
    ev = None
    for _ in range(int(round(seconds / dt))):
        obj, tray, ev = step_plant(obj, tray, TiltCommand(*u), dt, cfg, tier)
        if ev.kind is EventKind.FELL_OFF_TRAY:
            break
    return obj, tray, ev


def test_equilibrium_fixed_point():
    cfg = ObjectConfig()
    obj0 = ObjectState.at_rest(cfg)
    obj, tray, ev = step_plant(obj0, TrayState(), TiltCommand(), 0.002, cfg)
    assert np.array_equal(obj.p, obj0.p) and np.array_equal(obj.v, obj0.v)
    assert np.array_equal(tray.tilt, [0, 0])
    assert ev.kind is EventKind.IN_CONTACT


def test_cube_hold_five_seconds():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.10)
    beta = 0.8 * math.atan(cfg.mu_s)
    obj, _, _ = _run(cfg, (0.0, beta), 5.0)
    assert np.linalg.norm(obj.p[:2]) < 1e-6


def test_sphere_displacement_matches_servo_quadrature():
    cfg = ObjectConfig.from_mu(Shape.SPHERE, 1.0, 0.10)
    beta_c, w, T = 0.05, 25.0, 1.0
    obj, _, _ = _run(cfg, (0.0, beta_c), T)
    # critically damped servo from rest: beta(t) = beta_c (1 - (1 + w t) e^{-w t})
    t = np.linspace(0.0, T, 200001)
    beta = beta_c * (1 - (1 + w * t) * np.exp(-w * t))
    a = -5.0 / 7.0 * G * np.sin(beta)
    x = np.trapezoid((T - t) * a, t)  # double integral from rest
    assert obj.p[0] == pytest.approx(x, rel=5e-3)


def test_fell_off_event():
    cfg = ObjectConfig.from_mu(Shape.SPHERE, 1.0, 0.10)
    obj, _, ev = _run(cfg, (0.0, -0.3), 5.0)
    assert ev.kind is EventKind.FELL_OFF_TRAY
    assert off_tray(obj.p) and abs(obj.p[0]) > 0.2


def _euler_reference(cfg, u, seconds, dt=2e-5, omega=25.0):
    """Explicit Euler on the same vector field, stick/slip switched per step."""
    from dualtray.plant import _derivative, _object_vector

    u = np.asarray(u, dtype=float)
    y = _object_vector(ObjectState.at_rest(cfg), cfg)
    tilt, rate = np.zeros(2), np.zeros(2)
    stuck = True
    for _ in range(int(round(seconds / dt))):
        if stuck and not can_stick(tilt, cfg):
            stuck = False
        d = _derivative(y, tilt, cfg, stuck)
        y = [a + dt * b for a, b in zip(y, d)]
        tilt, rate = tilt + dt * rate, rate + dt * (omega**2 * (u - tilt) - 2 * omega * rate)
    return np.array(y[:2])


# commands that keep each shape on the tray for 2 s and include a breakaway
EULER_CASES = {
    Shape.CUBE: (0.01, (0.01, 0.015)),
    Shape.CYLINDER: (0.01, (0.015, 0.01)),
    Shape.SPHERE: (0.05, (0.005, 0.01)),
}


@pytest.mark.parametrize("shape", list(Shape))
def test_rk4_matches_fine_euler(shape):
    mu, u = EULER_CASES[shape]
    cfg = ObjectConfig.from_mu(shape, 1.0, mu)
    obj, _, ev = _run(cfg, u, 2.0)
    assert ev.kind is not EventKind.FELL_OFF_TRAY
    assert np.linalg.norm(obj.p[:2]) > 0.05
    ref = _euler_reference(cfg, u, 2.0)
    assert np.linalg.norm(obj.p[:2] - ref) < 1e-4


def test_energy_non_increasing_with_frozen_tilt():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.10)
    tilt = np.array([0.1, 0.25])
    tray = TrayState(tilt=tilt)
    obj = ObjectState.at_rest(cfg)
    obj.v = np.array([0.1, -0.05, 0.0])
    obj.stuck = False
    e_prev = mechanical_energy(obj, tray, cfg)
    for _ in range(500):
        obj, _ = advance_object(obj, cfg, lambda f: tilt, tilt, 0.002)
        e = mechanical_energy(obj, tray, cfg)
        assert e <= e_prev + 1e-12
        e_prev = e


def test_frame_equivariance():
    cfg = ObjectConfig.from_mu(Shape.CUBE, 1.0, 0.05)
    tray = TrayState(tilt=[0.05, 0.1], tilt_rate=[0.1, -0.2], com=[0.3, 0.1, 0.9])
    obj = ObjectState.at_rest(cfg, 0.02, -0.01)
    obj.v = np.array([0.05, 0.02, 0.0])
    obj.stuck = False
    u = TiltCommand(0.1, 0.2)
    o1, t1, _ = step_plant(obj, tray.copy(), u, 0.002, cfg)
    w_out, _, _ = step_plant(transform_state(obj, Frame.WORLD, tray), tray.copy(), u, 0.002, cfg)
    o1w = transform_state(o1, Frame.WORLD, t1)
    assert np.allclose(w_out.p, o1w.p, atol=1e-9) and np.allclose(w_out.v, o1w.v, atol=1e-9)


def test_contact_height_preserved():
    cfg = ObjectConfig.from_mu(Shape.SPHERE, 1.0, 0.1)
    obj, _, _ = _run(cfg, (0.1, 0.1), 0.5)
    assert abs(obj.p[2] - cfg.half_extent) < 1e-9


def test_determinism():
    cfg = ObjectConfig.from_mu(Shape.CYLINDER, 2.0, 0.05)
    a, _, _ = _run(cfg, (0.2, -0.1), 1.0)
    b, _, _ = _run(cfg, (0.2, -0.1), 1.0)
    assert np.array_equal(a.p, b.p) and np.array_equal(a.v, b.v)


def test_servo_step_tracks_command():
    tray = TrayState()
    for _ in range(500):
        tray, _ = servo_step(tray, np.array([0.3, -0.2]), 0.002, 25.0)
    assert np.allclose(tray.tilt, [0.3, -0.2], atol=1e-4)
