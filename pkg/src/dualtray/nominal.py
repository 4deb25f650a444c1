"""Reduced planar tray-object model used inside the MPC.

State (8): ``[p_x, p_y, v_x, v_y, alpha, beta, alpha_dot, beta_dot]`` in the
tray frame.  Friction opposes the slip of the sliding axes with magnitude
``mu g_n tanh(|v| / eps)``, so the one-step map is differentiable; the
tilt follows a critically damped second-order servo.  All functions are written against numpy operations and accept
:class:`dualtray.dual.Dual` inputs for forward-mode Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dual import Dual, stack, value
from .plant import G, ObjectConfig

NX = 8
NU = 2
T_S = 0.002
SPEED_FLOOR = 1e-6  # [m/s] keeps the slip speed differentiable at rest

IDX_P = slice(0, 2)
IDX_V = slice(2, 4)
IDX_TILT = slice(4, 6)
IDX_RATE = slice(6, 8)


@dataclass(frozen=True)
class NominalParams:
    mass_hat: float = 1.0  # [kg]
    mu_hat: float = 0.10  # effective Coulomb coefficient
    mu_s_hat: float | None = None  # static peak; None disables the Stribeck bump
    v_s_hat: float = 0.01  # [m/s]
    viscous_hat: float = 0.0  # [N s/m]
    servo_omega: float = 25.0  # [rad/s]
    epsilon: float = 0.01  # [m/s] tanh smoothing scale
    nominal_friction: bool = True
    inertia_factor: float = 0.0
    rolling_axes: tuple[bool, bool] = (False, False)

    def __post_init__(self) -> None:
        for name in ("mass_hat", "v_s_hat", "servo_omega", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mu_hat < 0 or self.viscous_hat < 0:
            raise ValueError("friction parameters must be non-negative")

    @classmethod
    def matched(cls, cfg: ObjectConfig, **kw) -> "NominalParams":
        """Parameters equal to the plant's for the given object."""
        base = dict(
            mass_hat=cfg.mass,
            mu_hat=cfg.mu_c,
            mu_s_hat=cfg.mu_s,
            v_s_hat=cfg.v_s,
            viscous_hat=cfg.viscous,
            inertia_factor=cfg.inertia_factor,
            rolling_axes=cfg.rolling_axes,
        )
        base.update(kw)
        return cls(**base)

    def with_friction_scale(self, scale: float) -> "NominalParams":
        mu_s = None if self.mu_s_hat is None else self.mu_s_hat * scale
        return replace(self, mu_hat=self.mu_hat * scale, mu_s_hat=mu_s)


def zero_residual() -> np.ndarray:
    return np.zeros(6)


def param_vector(params: NominalParams) -> np.ndarray:
    """Flat parameter layout consumed by the compiled kernels."""
    mu_s = params.mu_hat if params.mu_s_hat is None else params.mu_s_hat
    return np.array(
        [
            params.mass_hat,
            params.mu_hat,
            mu_s,
            params.v_s_hat,
            params.viscous_hat,
            params.servo_omega,
            params.epsilon,
            1.0 if params.nominal_friction else 0.0,
            params.inertia_factor,
            1.0 if params.rolling_axes[0] else 0.0,
            1.0 if params.rolling_axes[1] else 0.0,
        ]
    )


@dataclass(frozen=True)
class FeatureResidual:
    """Residual ``bias + z . [v, tanh(v/eps), 1]`` per planar axis.

    This is the form produced by the RLS bank; it is callable like any other
    residual source and also packs into the kernel layout.
    """

    bias: tuple[float, float] = (0.0, 0.0)
    zx: tuple[float, float, float] = (0.0, 0.0, 0.0)
    zy: tuple[float, float, float] = (0.0, 0.0, 0.0)
    epsilon: float = 0.01

    @classmethod
    def constant(cls, r) -> "FeatureResidual":
        r = np.asarray(r, dtype=float).reshape(-1)
        return cls(bias=(float(r[0]), float(r[1])))

    def vector(self) -> np.ndarray:
        return np.array([*self.bias, *self.zx, *self.zy, self.epsilon])

    def __call__(self, v):
        """Six-vector residual for velocities ``(..., 2)`` (Dual-compatible)."""
        parts = []
        for i, z in enumerate((self.zx, self.zy)):
            vi = v[..., i]
            parts.append(z[0] * vi + z[1] * np.tanh(vi / self.epsilon) + (z[2] + self.bias[i]))
        zero = 0.0 * parts[0]
        return stack(parts + [zero, zero, zero, zero])


def nominal_accel(s, u, params: NominalParams):
    """Tangent-plane acceleration ``(a_x, a_y)`` of the reduced model.

    ``s`` has the state on its last axis.  ``u`` is unused (the tilt state
    carries the actuation) but kept for signature symmetry with the plant.
    """
    del u
    vx, vy = s[..., 2], s[..., 3]
    alpha, beta = s[..., 4], s[..., 5]
    ca = np.cos(alpha)
    gx = -G * ca * np.sin(beta)
    gy = -G * np.sin(alpha)
    gn = G * ca * np.cos(beta)
    k = params.inertia_factor
    rolls = params.rolling_axes
    # friction acts against the slip of the sliding axes as a whole
    q = 0.0 * vx + SPEED_FLOOR**2
    for v, r in ((vx, rolls[0]), (vy, rolls[1])):
        if not r:
            q = q + v * v
    sigma = np.sqrt(q)
    scale = 0.0 * vx
    if params.nominal_friction:
        mu = params.mu_hat
        if params.mu_s_hat is not None and params.mu_s_hat != params.mu_hat:
            mu = mu + (params.mu_s_hat - params.mu_hat) * np.exp(-q / params.v_s_hat**2)
        scale = mu * gn * np.tanh(sigma / params.epsilon) / sigma
    out = []
    for v, g_t, r in ((vx, gx, rolls[0]), (vy, gy, rolls[1])):
        if r:
            out.append(g_t / (1.0 + k))
            continue
        a = g_t - scale * v
        if params.viscous_hat:
            a = a - (params.viscous_hat / params.mass_hat) * v
        out.append(a)
    return stack(out)


def dynamics(s, u, residual, params: NominalParams):
    """Continuous-time state derivative."""
    a = nominal_accel(s, u, params)
    w2 = params.servo_omega**2
    two_w = 2.0 * params.servo_omega
    tilt = s[..., 4], s[..., 5]
    rate = s[..., 6], s[..., 7]
    parts = [s[..., 2], s[..., 3], a[..., 0] + residual[..., 0], a[..., 1] + residual[..., 1], rate[0], rate[1]]
    for i in range(2):
        parts.append(w2 * (u[..., i] - tilt[i]) - two_w * rate[i])
    return stack(parts)


def phi(s, u, residual=None, params: NominalParams = NominalParams(), dt: float = T_S):
    """One RK4 step of the reduced model.

    ``residual`` is the 6-vector learned acceleration correction (only the
    translational x, y entries act on the planar state), or a callable
    mapping velocities ``(..., 2)`` to such vectors.  Either way it is held
    constant over the step.  Batched inputs (leading axes) are supported.
    """
    if residual is None:
        residual = np.zeros(6)
    elif callable(residual):
        residual = residual(s[..., 2:4])
    k1 = dynamics(s, u, residual, params)
    k2 = dynamics(s + (0.5 * dt) * k1, u, residual, params)
    k3 = dynamics(s + (0.5 * dt) * k2, u, residual, params)
    k4 = dynamics(s + dt * k3, u, residual, params)
    out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not isinstance(out, Dual) and not np.all(np.isfinite(out)):
        raise FloatingPointError("nominal model produced a non-finite state")
    return out


def phi_jacobians(s, u, residual=None, params: NominalParams = NominalParams(), dt: float = T_S):
    """``(dPhi/ds, dPhi/du)`` by forward-mode differentiation through RK4.

    Works on a single state (``(8,)`` / ``(2,)``) or a batch (``(K, 8)`` /
    ``(K, 2)``); also returns the value of ``phi``.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    n = NX + NU
    sd = Dual.seed(s, 0, n)
    ud = Dual.seed(u, NX, n)
    if residual is not None and not callable(residual):
        residual = np.asarray(residual, dtype=float)
    out = phi(sd, ud, residual, params, dt)
    val = value(out)
    if not np.all(np.isfinite(val)):
        raise FloatingPointError("nominal model produced a non-finite state")
    return out.der[..., :NX], out.der[..., NX:], val


def from_plant(obj, tray) -> np.ndarray:
    """Measured MPC state from tray-frame plant states."""
    return np.array([obj.p[0], obj.p[1], obj.v[0], obj.v[1], *tray.tilt, *tray.tilt_rate])
