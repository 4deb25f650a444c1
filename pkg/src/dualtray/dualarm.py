"""Dual planar-arm tilt actuation with a QP impedance controller.

Two identical RRR arms work in parallel sagittal (x-z) planes at
``y = +-w/2`` and hold the tray at its two long edges.  Tray pitch is the
common wrist angle; roll is the height difference of the two grasp points.
Each control step solves one QP over both arms' joint accelerations and maps
the optimum to torques through the rigid-body model, which also drives the
simulated arms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, qp
from .plant import G, TrayState

TRAY_WIDTH = 0.30  # [m] grasp separation along tray y
TRAY_HALF_LENGTH = 0.20  # [m]


class Unreachable(ValueError):
    pass


@dataclass(frozen=True)
class ArmModel:
    lengths: tuple[float, float, float] = (0.35, 0.30, 0.10)
    masses: tuple[float, float, float] = (2.0, 1.5, 0.5)
    inertias: tuple[float, float, float] | None = None  # about link COMs; None = slender rods
    load_mass: float = 1.0  # [kg] share of tray and object carried at the grasp point
    load_inertia: float = 0.08  # [kg m^2] share of tray pitch inertia on the wrist
    base: tuple[float, float] = (-0.45, -0.25)  # (x, z) relative to the tray centre
    q_min: tuple[float, float, float] = (-math.pi, -math.pi, -math.pi)
    q_max: tuple[float, float, float] = (math.pi, math.pi, math.pi)
    qd_max: tuple[float, float, float] = (3.0, 3.0, 4.0)  # [rad/s]
    tau_max: tuple[float, float, float] = (60.0, 40.0, 20.0)  # [N m]
    qdd_max: tuple[float, float, float] = (400.0, 400.0, 400.0)  # [rad/s^2]
    grasp_offset: float = 0.0  # [m] task point along link 3; 0 puts it on the wrist axis

    def __post_init__(self) -> None:
        if min(self.lengths) <= 0 or min(self.masses) <= 0:
            raise ValueError("link lengths and masses must be positive")
        if not 0.0 <= self.grasp_offset <= self.lengths[2]:
            raise ValueError("grasp offset must lie on the wrist link")

    @property
    def link_inertias(self) -> np.ndarray:
        if self.inertias is not None:
            return np.asarray(self.inertias, dtype=float)
        L = np.asarray(self.lengths)
        return np.asarray(self.masses) * L * L / 12.0


@dataclass(frozen=True)
class ImpedanceGains:
    K: np.ndarray = field(default_factory=lambda: np.diag([5000.0, 5000.0, 50.0]))
    K_null: np.ndarray = field(default_factory=lambda: 7.0 * np.eye(3))
    w_imp: float = 1.0
    w_pos: float = 0.02
    task_weights: tuple[float, float, float] = (100.0, 100.0, 1.0)  # x, z, theta rows

    def __post_init__(self) -> None:
        for name in ("K", "K_null"):
            M = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, M)
        if self.w_imp <= 0 or self.w_pos < 0 or min(self.task_weights) <= 0:
            raise ValueError("QP weights must be positive")


@dataclass
class ArmDynamics:
    M: np.ndarray
    h: np.ndarray
    J: np.ndarray
    Jdot: np.ndarray


# ---------------------------------------------------------------------------
# kinematics and dynamics


def _angles(q) -> np.ndarray:
    return np.cumsum(q)


def _point_jacobians(q, qd, model: ArmModel, link: int, d: float):
    """Position, linear Jacobian and its time derivative of a point ``d``
    along link ``link`` (0-based)."""
    phi = _angles(q)
    phid = _angles(qd)
    L = model.lengths
    reach = [L[l] for l in range(link)] + [d]
    pos = np.array(model.base, dtype=float)
    for l in range(link + 1):
        pos = pos + reach[l] * np.array([math.cos(phi[l]), math.sin(phi[l])])
    Jv = np.zeros((2, 3))
    Jvd = np.zeros((2, 3))
    for j in range(link + 1):
        for l in range(j, link + 1):
            c, s = math.cos(phi[l]), math.sin(phi[l])
            Jv[:, j] += reach[l] * np.array([-s, c])
            Jvd[:, j] += reach[l] * np.array([-c, -s]) * phid[l]
    return pos, Jv, Jvd


def forward_kinematics(q, model: ArmModel) -> np.ndarray:
    """Grasp pose ``(x, z, theta)`` in the arm plane."""
    q = np.asarray(q, dtype=float)
    *_, pos = _kernels.arm_dynamics(q, np.zeros(3), *_kernel_args(model))
    return np.array([pos[0], pos[1], float(np.sum(q))])


def _kernel_args(model: ArmModel):
    args = model.__dict__.get("_kargs")
    if args is None:
        args = (
            np.asarray(model.lengths, dtype=float),
            np.asarray(model.masses, dtype=float),
            model.link_inertias.astype(float),
            float(model.load_mass),
            float(model.load_inertia),
            np.asarray(model.base, dtype=float),
            float(model.grasp_offset),
            G,
        )
        object.__setattr__(model, "_kargs", args)
    return args


def arm_dynamics(q, qd, model: ArmModel) -> ArmDynamics:
    """Mass matrix, bias torques (Coriolis plus gravity), task Jacobian and
    its derivative for one arm."""
    M, h, J, Jdot, _ = _kernels.arm_dynamics(
        np.asarray(q, dtype=float), np.asarray(qd, dtype=float), *_kernel_args(model)
    )
    return ArmDynamics(M=M, h=h, J=J, Jdot=Jdot)


def arm_dynamics_reference(q, qd, model: ArmModel) -> ArmDynamics:
    """Uncompiled counterpart of :func:`arm_dynamics`."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    M = np.zeros((3, 3))
    h = np.zeros(3)
    inert = model.link_inertias
    for i in range(3):
        _, Jv, Jvd = _point_jacobians(q, qd, model, i, 0.5 * model.lengths[i])
        Jw = np.array([1.0 if j <= i else 0.0 for j in range(3)])
        m = model.masses[i]
        M += m * Jv.T @ Jv + inert[i] * np.outer(Jw, Jw)
        h += m * Jv.T @ (Jvd @ qd) + m * G * Jv[1]
    _, Jv, Jvd = _point_jacobians(q, qd, model, 2, model.grasp_offset)
    Jw = np.ones(3)
    M += model.load_mass * Jv.T @ Jv + model.load_inertia * np.outer(Jw, Jw)
    h += model.load_mass * Jv.T @ (Jvd @ qd) + model.load_mass * G * Jv[1]
    J = np.vstack([Jv, Jw])
    Jdot = np.vstack([Jvd, np.zeros(3)])
    return ArmDynamics(M=0.5 * (M + M.T), h=h, J=J, Jdot=Jdot)


def inverse_kinematics(pose, model: ArmModel, elbow: float = 1.0) -> np.ndarray:
    """Joint angles placing the grasp at ``pose = (x, z, theta)``."""
    x, z, th = pose
    L1, L2, _ = model.lengths
    d = model.grasp_offset
    wx = x - d * math.cos(th) - model.base[0]
    wz = z - d * math.sin(th) - model.base[1]
    r2 = wx * wx + wz * wz
    c2 = (r2 - L1 * L1 - L2 * L2) / (2 * L1 * L2)
    if abs(c2) > 1.0:
        raise Unreachable(f"grasp pose {pose} outside the workspace")
    q2 = elbow * math.acos(c2)
    q1 = math.atan2(wz, wx) - math.atan2(L2 * math.sin(q2), L1 + L2 * math.cos(q2))
    return np.array([q1, q2, th - q1 - q2])


def task_velocity(q, qd, model: ArmModel) -> np.ndarray:
    return arm_dynamics(q, qd, model).J @ np.asarray(qd, dtype=float)


# ---------------------------------------------------------------------------
# references and task errors


def tray_to_ee_refs(u, width: float = TRAY_WIDTH, com=(0.0, 0.0), model: ArmModel | None = None):
    """Planar grasp references ``(x, z, theta)`` for the left (+y) and right arm.

    The grasp points sit on the tray's pitch axis, so pitch only turns the
    wrists, while roll lifts the left grasp and lowers the right one.
    """
    alpha, beta = float(u[0]), float(u[1])
    dz = 0.5 * width * math.sin(alpha)
    left = np.array([com[0], com[1] + dz, beta])
    right = np.array([com[0], com[1] - dz, beta])
    if model is not None:
        for pose in (left, right):
            inverse_kinematics(pose, model)
    return left, right


def sqrtm_spd(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


@dataclass
class ImpedanceTerms:
    Lam: np.ndarray
    D: np.ndarray
    c: np.ndarray  # e_imp = J qdd - c
    near_singular: bool


def impedance_terms(y, yd, y_ref, yd_ref, dyn: ArmDynamics, gains: ImpedanceGains, qd) -> ImpedanceTerms:
    """Pieces of the impedance error, which is affine in the accelerations."""
    J = dyn.J
    Minv = np.linalg.inv(dyn.M)
    Lam_inv = J @ Minv @ J.T
    near = bool(np.linalg.cond(J) > 1e6)
    if near:
        Lam = np.linalg.inv(Lam_inv + 1e-6 * np.eye(3))
    else:
        Lam = np.linalg.inv(Lam_inv)
    Lam = 0.5 * (Lam + Lam.T)
    sL = sqrtm_spd(Lam)
    sK = sqrtm_spd(gains.K)
    D = sL @ sK + sK @ sL
    wrench = D @ (np.asarray(yd_ref) - np.asarray(yd)) + gains.K @ (np.asarray(y_ref) - np.asarray(y))
    c = -dyn.Jdot @ np.asarray(qd) + Lam_inv @ wrench
    return ImpedanceTerms(Lam=Lam, D=0.5 * (D + D.T), c=c, near_singular=near)


def impedance_error(y, yd, y_ref, yd_ref, qdd, dyn: ArmDynamics, gains: ImpedanceGains, qd) -> np.ndarray:
    """``(J qdd + Jdot qd) - Lam^-1 [D (yd_ref - yd) + K (y_ref - y)]``."""
    t = impedance_terms(y, yd, y_ref, yd_ref, dyn, gains, qd)
    return dyn.J @ np.asarray(qdd) - t.c


def posture_target(q, qd, q_ref, gains: ImpedanceGains) -> np.ndarray:
    """Acceleration the posture task asks for (zero reference velocity)."""
    Kn = gains.K_null
    return 2.0 * sqrtm_spd(Kn) @ (-np.asarray(qd)) + Kn @ (np.asarray(q_ref) - np.asarray(q))


def posture_error(q, qd, qdd, q_ref, gains: ImpedanceGains) -> np.ndarray:
    return np.asarray(qdd) - posture_target(q, qd, q_ref, gains)


# ---------------------------------------------------------------------------
# QP


@dataclass
class QpSolution:
    qdd: np.ndarray  # (6,) left then right
    objective: float
    active: int
    kkt_residual: float
    fallback: bool = False
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None


def acceleration_bounds(q, qd, dyn: ArmDynamics, model: ArmModel, dt: float, torque: str = "interval"):
    """Box on one arm's accelerations from position and velocity limits.

    Position limits use a second-order stopping condition over one step.
    With ``torque="interval"`` the torque limits are folded into the box by
    interval arithmetic over the off-diagonal mass terms (the other
    accelerations bounded by the kinematic box); otherwise they are left to
    :func:`torque_rows`.
    """
    q = np.asarray(q)
    qd = np.asarray(qd)
    qmin, qmax = np.asarray(model.q_min), np.asarray(model.q_max)
    vmax = np.asarray(model.qd_max)
    amax = np.asarray(model.qdd_max)
    lo = np.maximum.reduce([(-vmax - qd) / dt, 2.0 * (qmin - q - qd * dt) / dt**2, -amax])
    hi = np.minimum.reduce([(vmax - qd) / dt, 2.0 * (qmax - q - qd * dt) / dt**2, amax])
    if torque == "interval":
        A = np.maximum(np.abs(lo), np.abs(hi))
        M, h = dyn.M, dyn.h
        tmax = np.asarray(model.tau_max)
        lo_t, hi_t = lo.copy(), hi.copy()
        for i in range(3):
            spill = sum(abs(M[i, j]) * A[j] for j in range(3) if j != i)
            lo_t[i] = max(lo[i], (-tmax[i] - h[i] + spill) / M[i, i])
            hi_t[i] = min(hi[i], (tmax[i] - h[i] - spill) / M[i, i])
        lo, hi = lo_t, hi_t
    return lo, hi


def torque_rows(dyn: ArmDynamics, model: ArmModel):
    """Exact torque limits ``|M qdd + h| <= tau_max`` as ``A qdd <= b``."""
    tmax = np.asarray(model.tau_max, dtype=float)
    return np.vstack([dyn.M, -dyn.M]), np.concatenate([tmax - dyn.h, tmax + dyn.h])


def qp_matrices(J_list, c_list, b_list, gains: ImpedanceGains):
    """Hessian and gradient of the joint objective over ``(qdd_L, qdd_R)``."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    W = gains.w_imp * np.asarray(gains.task_weights)
    for k, (J, c, b) in enumerate(zip(J_list, c_list, b_list)):
        s = slice(3 * k, 3 * k + 3)
        H[s, s] = 2.0 * (J.T @ (W[:, None] * J) + gains.w_pos * np.eye(3))
        g[s] = -2.0 * (J.T @ (W * c) + gains.w_pos * b)
    return H, g


def solve_qp(J_list, c_list, b_list, lo, hi, gains: ImpedanceGains, extra=None) -> QpSolution:
    """Minimise the weighted impedance and posture errors of both arms
    subject to the acceleration box and optional extra rows ``(A, b)``.

    If the constraints admit no point, the unconstrained minimiser clipped
    to the box is returned and flagged.
    """
    H, g = qp_matrices(J_list, c_list, b_list, gains)
    W = gains.w_imp * np.asarray(gains.task_weights)
    const = sum(float(c @ (W * c)) + gains.w_pos * float(b @ b) for c, b in zip(c_list, b_list))
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def fallback():
        x = np.clip(np.linalg.solve(H, -g), np.minimum(lo, hi), np.maximum(lo, hi))
        return QpSolution(x, float(0.5 * x @ H @ x + g @ x + const), 0, np.inf, True, lo, hi)

    if np.any(lo > hi):
        return fallback()
    A, b = qp.box_constraints(lo, hi)
    x0 = np.clip(np.zeros(6), lo, hi)
    if extra is not None:
        A = np.vstack([A, extra[0]])
        b = np.concatenate([b, extra[1]])
        x0 = _feasible_point(A, b, lo, hi)
        if x0 is None:
            return fallback()
    res = qp.solve(H, g, A, b, x0)
    # active bounds are met to roundoff by the KKT solve; snap them exactly
    x = np.clip(res.x, lo, hi)
    for i in res.active:
        if i < 6:
            x[i] = hi[i]
        elif i < 12:
            x[i - 6] = lo[i - 6]
    return QpSolution(
        qdd=x,
        objective=res.objective + const,
        active=len(res.active),
        kkt_residual=res.kkt_residual,
        fallback=False,
        lo=lo,
        hi=hi,
    )


def _feasible_point(A, b, lo, hi):
    """A point of ``{A x <= b}`` (which includes the box) or None.

    Phase one: minimise the squared constraint violation from the box
    centre by projected gradient steps, then verify.
    """
    x = np.clip(np.zeros(A.shape[1]), lo, hi)
    tol = 1e-9 * (1.0 + np.max(np.abs(b)))
    if np.all(A @ x - b <= tol):
        return x
    L = np.linalg.norm(A, 2) ** 2
    for _ in range(2000):
        viol = np.maximum(A @ x - b, 0.0)
        if np.all(viol <= tol):
            return x
        x = np.clip(x - (A.T @ viol) / L, lo, hi)
    return None


def torques(qdd, dyn: ArmDynamics) -> np.ndarray:
    """``tau = M qdd + h``."""
    return dyn.M @ np.asarray(qdd) + dyn.h


# ---------------------------------------------------------------------------
# closed-loop actuator


def _forward_accel(q, qd, tau, model):
    dyn = arm_dynamics_reference(q, qd, model)
    return np.linalg.solve(dyn.M, tau - dyn.h)


def rk4_arm(q, qd, tau, dt, model):
    """Torque-driven RK4 step of one arm."""
    return _kernels.arm_rk4(
        np.asarray(q, dtype=float), np.asarray(qd, dtype=float), np.asarray(tau, dtype=float), dt,
        *_kernel_args(model),
    )


def rk4_arm_reference(q, qd, tau, dt, model):
    k1q, k1v = qd, _forward_accel(q, qd, tau, model)
    k2q = qd + 0.5 * dt * k1v
    k2v = _forward_accel(q + 0.5 * dt * k1q, k2q, tau, model)
    k3q = qd + 0.5 * dt * k2v
    k3v = _forward_accel(q + 0.5 * dt * k2q, k3q, tau, model)
    k4q = qd + dt * k3v
    k4v = _forward_accel(q + dt * k3q, k4q, tau, model)
    q1 = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd1 = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return q1, qd1


@dataclass
class DualArmActuator:
    """Stateful tilt actuator for the ``DualArm`` plant tier."""

    model: ArmModel = field(default_factory=ArmModel)
    gains: ImpedanceGains = field(default_factory=ImpedanceGains)
    width: float = TRAY_WIDTH
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world tray centre, reported only
    q: np.ndarray | None = None  # (2, 3)
    qd: np.ndarray | None = None
    q_ref: np.ndarray | None = None
    tau: np.ndarray = field(default_factory=lambda: np.zeros(6))
    torque_limits: str = "exact"  # or "interval" (folded into the box)
    last: QpSolution | None = None
    flags: dict = field(default_factory=lambda: {"fallback": 0, "near_singular": 0})

    def __post_init__(self) -> None:
        if self.q is None:
            left, right = tray_to_ee_refs((0.0, 0.0), self.width)
            self.q = np.stack([inverse_kinematics(left, self.model), inverse_kinematics(right, self.model)])
        self.q = np.asarray(self.q, dtype=float)
        if self.qd is None:
            self.qd = np.zeros((2, 3))
        if self.q_ref is None:
            self.q_ref = self.q.copy()
        self.tau = self.compensation()

    def compensation(self) -> np.ndarray:
        return np.concatenate([arm_dynamics(self.q[k], self.qd[k], self.model).h for k in range(2)])

    def poses(self) -> tuple[np.ndarray, np.ndarray]:
        """Grasp poses and task velocities, shape (2, 3) each."""
        y = np.stack([forward_kinematics(self.q[k], self.model) for k in range(2)])
        yd = np.stack([task_velocity(self.q[k], self.qd[k], self.model) for k in range(2)])
        return y, yd

    def tray_state(self) -> TrayState:
        y, yd = self.poses()
        s = (y[0, 1] - y[1, 1]) / self.width
        alpha = math.asin(max(-1.0, min(1.0, s)))
        beta = 0.5 * (y[0, 2] + y[1, 2])
        alpha_dot = (yd[0, 1] - yd[1, 1]) / (self.width * max(math.cos(alpha), 1e-9))
        beta_dot = 0.5 * (yd[0, 2] + yd[1, 2])
        return TrayState(np.array([alpha, beta]), np.array([alpha_dot, beta_dot]), self.com.copy())

    def rigidity_error(self) -> float:
        """Largest departure [m] of the grasps from one rigid tray pose.

        The grasp separation along y is taken up by the grasp compliance
        (the arms are planar), so only the in-plane residuals count.
        """
        y, _ = self.poses()
        cx, cz = 0.0, 0.0  # arm geometry is expressed relative to the tray centre
        return float(
            max(
                abs(y[0, 0] - cx),
                abs(y[1, 0] - cx),
                abs(0.5 * (y[0, 1] + y[1, 1]) - cz),
                abs(y[0, 2] - y[1, 2]) * TRAY_HALF_LENGTH,
            )
        )

    def control(self, u, dt: float, yd_ref=None) -> QpSolution:
        refs = tray_to_ee_refs(u, self.width)
        J_list, c_list, b_list, lo, hi, rows = [], [], [], [], [], []
        y, yd = self.poses()
        for k in range(2):
            dyn = arm_dynamics(self.q[k], self.qd[k], self.model)
            ydr = np.zeros(3) if yd_ref is None else np.asarray(yd_ref[k])
            t = impedance_terms(y[k], yd[k], refs[k], ydr, dyn, self.gains, self.qd[k])
            if t.near_singular:
                self.flags["near_singular"] += 1
            J_list.append(dyn.J)
            c_list.append(t.c)
            b_list.append(posture_target(self.q[k], self.qd[k], self.q_ref[k], self.gains))
            l, h = acceleration_bounds(self.q[k], self.qd[k], dyn, self.model, dt, self.torque_limits)
            lo.append(l)
            hi.append(h)
            rows.append(torque_rows(dyn, self.model))
        extra = None
        if self.torque_limits == "exact":
            A = np.zeros((12, 6))
            A[:6, :3] = rows[0][0]
            A[6:, 3:] = rows[1][0]
            extra = (A, np.concatenate([rows[0][1], rows[1][1]]))
        sol = solve_qp(J_list, c_list, b_list, np.concatenate(lo), np.concatenate(hi), self.gains, extra)
        if sol.fallback:
            self.flags["fallback"] += 1
        return sol

    def step(self, u, dt: float) -> TrayState:
        """One control-and-integrate step; returns the new tray state."""
        sol = self.control(u, dt)
        tau = np.empty(6)
        for k in range(2):
            dyn = arm_dynamics(self.q[k], self.qd[k], self.model)
            tau[3 * k : 3 * k + 3] = torques(sol.qdd[3 * k : 3 * k + 3], dyn)
        tmax = np.tile(self.model.tau_max, 2)
        tau = np.clip(tau, -tmax, tmax)
        for k in range(2):
            self.q[k], self.qd[k] = rk4_arm(self.q[k], self.qd[k], tau[3 * k : 3 * k + 3], dt, self.model)
        self.tau = tau
        self.last = sol
        return self.tray_state()
