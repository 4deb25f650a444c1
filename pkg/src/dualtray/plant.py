"""Ground-truth object-on-tray simulation.

Conventions
-----------
Tilt is ``(alpha, beta)``: roll about the tray x axis and pitch about the
tray y axis.  Positive roll raises the tray's +y edge and positive pitch
raises its +x edge, i.e. the tray attitude in the world is
``R_x(alpha) @ R_y(-beta)``.  Gravity therefore pulls toward -x for
positive pitch and toward -y for positive roll.

The object lives on the tray plane.  Contact forces are closed forms per
shape (stick / slide / roll) instead of a general contact solver.  Rotating
frame (Coriolis, centrifugal) terms of the tilting tray are neglected.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

G = 9.81

TRAY_LENGTH = 0.40  # along tray x [m]
TRAY_WIDTH = 0.30  # along tray y [m]

V_STICK = 1e-4  # [m/s] slip speed below which the contact may stick
RESTICK_HYSTERESIS = 2.0
V_DIRECTION = 1e-3  # [m/s] below this the slip direction is blended with its attractor


class Shape(str, enum.Enum):
    CUBE = "cube"
    CYLINDER = "cylinder"
    SPHERE = "sphere"


class Frame(str, enum.Enum):
    WORLD = "world"
    TRAY = "tray"
    OBJECT = "object"


class Tier(str, enum.Enum):
    IDEAL_SERVO = "ideal_servo"
    DUAL_ARM = "dual_arm"


class EventKind(str, enum.Enum):
    IN_CONTACT = "InContact"
    SLIDING_TO_STICKING = "SlidingToSticking"
    STICKING_TO_SLIDING = "StickingToSliding"
    FELL_OFF_TRAY = "FellOffTray"


class NotInContact(RuntimeError):
    pass


class NonFinite(FloatingPointError):
    pass


@dataclass(frozen=True)
class PlantEvent:
    kind: EventKind

    @property
    def terminal(self) -> bool:
        return self.kind is EventKind.FELL_OFF_TRAY


_INERTIA_FACTORS = {Shape.SPHERE: 2.0 / 5.0, Shape.CYLINDER: 0.5}


@dataclass(frozen=True)
class ObjectConfig:
    shape: Shape = Shape.CUBE
    mass: float = 1.0  # [kg]
    half_extent: float = 0.03  # cube half side / cylinder or sphere radius [m]
    mu_s: float = 0.12
    mu_c: float = 0.10
    v_s: float = 0.01  # Stribeck velocity [m/s]
    viscous: float = 0.0  # [N s/m]
    rolling: bool = True  # False forces rolling shapes to slide

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", Shape(self.shape))
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if not (self.mu_s >= self.mu_c > 0):
            raise ValueError("friction must satisfy mu_s >= mu_c > 0")
        if self.v_s <= 0 or self.half_extent <= 0 or self.viscous < 0:
            raise ValueError("v_s, half_extent must be positive and viscous non-negative")

    @classmethod
    def from_mu(cls, shape: Shape | str, mass: float, mu: float, **kw) -> "ObjectConfig":
        """Config from a single friction coefficient: mu_c = mu, mu_s = 1.2 mu."""
        return cls(shape=Shape(shape), mass=mass, mu_c=mu, mu_s=1.2 * mu, **kw)

    @property
    def inertia_factor(self) -> float:
        """I / (m r^2) about the rolling axis; 0 for the cube."""
        return _INERTIA_FACTORS.get(self.shape, 0.0)

    @property
    def rolling_axes(self) -> tuple[bool, bool]:
        """Which tray axes (x, y) the contact rolls along."""
        if not self.rolling or self.shape is Shape.CUBE:
            return (False, False)
        if self.shape is Shape.SPHERE:
            return (True, True)
        # cylinder axis is parallel to tray y, so it rolls along x
        return (True, False)

    @property
    def contact_code(self) -> float:
        return {Shape.CUBE: 0.0, Shape.CYLINDER: 0.5, Shape.SPHERE: 1.0}[self.shape]


@dataclass
class ObjectState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame: Frame = Frame.TRAY
    # contact regime bookkeeping, meaningful in the tray frame
    stuck: bool = False
    restick_armed: bool = True

    def __post_init__(self) -> None:
        for name in ("p", "theta", "v", "w"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        self.frame = Frame(self.frame)

    def copy(self) -> "ObjectState":
        return replace(self, p=self.p.copy(), theta=self.theta.copy(), v=self.v.copy(), w=self.w.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(np.concatenate([self.p, self.theta, self.v, self.w]))))

    @classmethod
    def at_rest(cls, cfg: ObjectConfig, x: float = 0.0, y: float = 0.0) -> "ObjectState":
        return cls(p=np.array([x, y, cfg.half_extent]), stuck=True)


@dataclass
class TrayState:
    tilt: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tilt_rate: np.ndarray = field(default_factory=lambda: np.zeros(2))
    com: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0]))

    def __post_init__(self) -> None:
        self.tilt = np.asarray(self.tilt, dtype=float).reshape(2)
        self.tilt_rate = np.asarray(self.tilt_rate, dtype=float).reshape(2)
        self.com = np.asarray(self.com, dtype=float).reshape(3)

    def copy(self) -> "TrayState":
        return TrayState(self.tilt.copy(), self.tilt_rate.copy(), self.com.copy())


@dataclass(frozen=True)
class TiltCommand:
    alpha: float = 0.0
    beta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta])

    @classmethod
    def from_array(cls, u) -> "TiltCommand":
        return cls(float(u[0]), float(u[1]))


# ---------------------------------------------------------------------------
# kinematics


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(c_: float) -> np.ndarray:
    c, s = math.cos(c_), math.sin(c_)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def tray_attitude(alpha: float, beta: float) -> np.ndarray:
    """Tray-to-world rotation (columns are the tray axes in world)."""
    return rot_x(alpha) @ rot_y(-beta)


def tilt_matrix(alpha: float, beta: float) -> np.ndarray:
    """World-to-tray rotation."""
    return tray_attitude(alpha, beta).T


def tray_angular_velocity(tilt, tilt_rate) -> np.ndarray:
    """World-frame angular velocity of the tray for the given tilt rates."""
    alpha, beta = float(tilt[0]), float(tilt[1])
    ad, bd = float(tilt_rate[0]), float(tilt_rate[1])
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array([ad, -bd * ca, -bd * sa])


def rpy_to_matrix(rpy) -> np.ndarray:
    return rot_z(rpy[2]) @ rot_y(rpy[1]) @ rot_x(rpy[0])


def matrix_to_rpy(R: np.ndarray) -> np.ndarray:
    pitch = math.atan2(-R[2, 0], math.hypot(R[0, 0], R[1, 0]))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def gravity_in_tray(tilt) -> np.ndarray:
    """Gravity vector expressed in tray coordinates [m/s^2]."""
    alpha, beta = float(tilt[0]), float(tilt[1])
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    return np.array([-G * ca * sb, -G * sa, -G * ca * cb])


def transform_state(state: ObjectState, to: Frame | str, tray: TrayState) -> ObjectState:
    """Map an object state between the world and tray frames.

    The object frame has no independent meaning for pose here (it is the
    body itself), so only ``World <-> Tray`` is supported.
    """
    to = Frame(to)
    if to is state.frame:
        raise ValueError("source and target frames must differ")
    if Frame.OBJECT in (to, state.frame):
        raise ValueError("object-frame transforms are not defined for poses")
    T = tray_attitude(*tray.tilt)
    Om = tray_angular_velocity(tray.tilt, tray.tilt_rate)
    out = state.copy()
    if to is Frame.WORLD:
        r = T @ state.p
        out.p = tray.com + r
        out.v = T @ state.v + np.cross(Om, r)
        out.w = T @ state.w + Om
        out.theta = matrix_to_rpy(T @ rpy_to_matrix(state.theta))
    else:
        r = state.p - tray.com
        out.p = T.T @ r
        out.v = T.T @ (state.v - np.cross(Om, r))
        out.w = T.T @ (state.w - Om)
        out.theta = matrix_to_rpy(T.T @ rpy_to_matrix(state.theta))
    out.frame = to
    return out


# ---------------------------------------------------------------------------
# contact dynamics


def stribeck_coefficient(speed: float, cfg: ObjectConfig) -> float:
    return cfg.mu_c + (cfg.mu_s - cfg.mu_c) * math.exp(-((speed / cfg.v_s) ** 2))


def _rolling_velocity(w, cfg: ObjectConfig) -> tuple[float, float]:
    """Contact-point velocity contributed by spin, in tray x/y."""
    rx, ry = cfg.rolling_axes
    r = cfg.half_extent
    return (r * w[1] if rx else 0.0, -r * w[0] if ry else 0.0)


def _stuck_force(gt: tuple[float, float], cfg: ObjectConfig) -> tuple[float, float]:
    """Tangential contact force that keeps the contact point at rest."""
    k = cfg.inertia_factor
    out = []
    for gd, rolls in zip(gt, cfg.rolling_axes):
        out.append(-cfg.mass * gd * (k / (1.0 + k) if rolls else 1.0))
    return out[0], out[1]


def can_stick(tilt, cfg: ObjectConfig) -> bool:
    """Whether static friction can hold the contact point at this tilt."""
    g = gravity_in_tray(tilt)
    fx, fy = _stuck_force((g[0], g[1]), cfg)
    return math.hypot(fx, fy) <= cfg.mu_s * cfg.mass * (-g[2])


def _slip_direction(gx, gy, normal, mu, cfg: ObjectConfig) -> tuple[float, float]:
    """Unit slip direction that Coulomb friction keeps self-consistent.

    Slip accelerates as ``g - c * d`` with ``c_i = mu N / m`` times
    ``(1 + k) / k`` on rolling axes; the direction ``d`` satisfying
    ``g - c * d = lam * d`` with ``lam >= 0`` is ``d_i = g_i / (lam + c_i)``.
    """
    k = cfg.inertia_factor
    base = mu * normal / cfg.mass
    c = [base * ((1.0 + k) / k if rolls else 1.0) for rolls in cfg.rolling_axes]
    g = (gx, gy)

    def norm2(lam):
        return sum((gi / (lam + ci)) ** 2 for gi, ci in zip(g, c))

    lam = 0.0
    if norm2(0.0) > 1.0:
        lo, hi = 0.0, math.hypot(gx, gy)
        for _ in range(60):
            lam = 0.5 * (lo + hi)
            lo, hi = (lam, hi) if norm2(lam) > 1.0 else (lo, lam)
    d = [gi / (lam + ci) for gi, ci in zip(g, c)]
    n = math.hypot(*d)
    return (d[0] / n, d[1] / n) if n > 0 else (0.0, 0.0)


def _rates(sx, sy, gx, gy, normal, cfg: ObjectConfig, stuck: bool):
    """Linear and rolling accelerations for the given slip and gravity."""
    k = cfg.inertia_factor
    rx, ry = cfg.rolling_axes
    m = cfg.mass
    if stuck:
        fx, fy = _stuck_force((gx, gy), cfg)
    else:
        speed = math.hypot(sx, sy)
        mu = stribeck_coefficient(speed, cfg)
        dx, dy = sx, sy
        if speed < V_DIRECTION:
            # at small slip the direction relaxes faster than a step; blend
            # in the direction it settles to
            hx, hy = _slip_direction(gx, gy, normal, mu, cfg)
            w = 1.0 - speed / V_DIRECTION
            dx, dy = sx / V_DIRECTION + w * hx, sy / V_DIRECTION + w * hy
        n = math.hypot(dx, dy)
        dx, dy = (dx / n, dy / n) if n > 1e-300 else (0.0, 0.0)
        fx = -mu * normal * dx - cfg.viscous * sx
        fy = -mu * normal * dy - cfg.viscous * sy
    ax, ay = gx + fx / m, gy + fy / m
    # spin responds to the contact force on rolling axes
    wx = -fx / (k * m) if rx else 0.0
    wy = -fy / (k * m) if ry else 0.0
    if stuck:
        wx = ax if rx else 0.0
        wy = ay if ry else 0.0
    return ax, ay, wx, wy


def contact_accel(state: ObjectState, cfg: ObjectConfig, tilt) -> np.ndarray:
    """Tangent-plane acceleration of the object in the tray frame.

    The third entry is the normal residual and is always zero while in
    contact.  Whether the contact sticks is decided from ``state.stuck``
    and the static friction cone.
    """
    if state.frame is not Frame.TRAY:
        raise ValueError("contact_accel expects a tray-frame state")
    g = gravity_in_tray(tilt)
    normal = -cfg.mass * g[2]
    if normal <= 0.0:
        raise NotInContact(f"normal force {normal:.3g} N")
    wr = _rolling_velocity(state.w, cfg)
    sx, sy = state.v[0] - wr[0], state.v[1] - wr[1]
    stuck = math.hypot(sx, sy) < V_STICK and can_stick(tilt, cfg)
    ax, ay, _, _ = _rates(sx, sy, g[0], g[1], normal, cfg, stuck)
    return np.array([ax, ay, 0.0])


# ---------------------------------------------------------------------------
# time stepping


@dataclass(frozen=True)
class ServoParams:
    omega: float = 25.0  # [rad/s], critically damped


def servo_accel(tilt, rate, u, omega: float):
    return omega * omega * (u - tilt) - 2.0 * omega * rate


def _object_vector(obj: ObjectState, cfg: ObjectConfig) -> list[float]:
    wr = _rolling_velocity(obj.w, cfg)
    return [obj.p[0], obj.p[1], obj.v[0], obj.v[1], wr[0], wr[1]]


def _derivative(y, tilt, cfg, stuck):
    g = gravity_in_tray(tilt)
    normal = -cfg.mass * g[2]
    if normal <= 0.0:
        raise NotInContact(f"normal force {normal:.3g} N")
    sx, sy = y[2] - y[4], y[3] - y[5]
    ax, ay, wx, wy = _rates(sx, sy, g[0], g[1], normal, cfg, stuck)
    return [y[2], y[3], ax, ay, wx, wy]


def _rk4_object(y, cfg, stuck, tilt_at, dt):
    """RK4 over the object vector with tilt given as a function of stage time."""
    k1 = _derivative(y, tilt_at(0.0), cfg, stuck)
    y2 = [a + 0.5 * dt * b for a, b in zip(y, k1)]
    k2 = _derivative(y2, tilt_at(0.5), cfg, stuck)
    y3 = [a + 0.5 * dt * b for a, b in zip(y, k2)]
    k3 = _derivative(y3, tilt_at(0.5), cfg, stuck)
    y4 = [a + dt * b for a, b in zip(y, k3)]
    k4 = _derivative(y4, tilt_at(1.0), cfg, stuck)
    return [a + dt / 6.0 * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(y, k1, k2, k3, k4)]


def servo_step(tray: TrayState, u, dt: float, omega: float):
    """Advance the ideal tilt servo by one RK4 step.

    Returns the new tray state and a function giving the tilt at a
    fraction of the step (stage values of the same RK4 scheme, so object
    and tray are integrated consistently).
    """
    u = np.asarray(u, dtype=float)
    x0, v0 = tray.tilt, tray.tilt_rate
    k1x, k1v = v0, servo_accel(x0, v0, u, omega)
    x2, v2 = x0 + 0.5 * dt * k1x, v0 + 0.5 * dt * k1v
    k2x, k2v = v2, servo_accel(x2, v2, u, omega)
    x3, v3 = x0 + 0.5 * dt * k2x, v0 + 0.5 * dt * k2v
    k3x, k3v = v3, servo_accel(x3, v3, u, omega)
    x4, v4 = x0 + dt * k3x, v0 + dt * k3v
    k4x, k4v = v4, servo_accel(x4, v4, u, omega)
    x1 = x0 + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v1 = v0 + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    # stage 2 and 3 see different tilt values; use their mean at the midpoint
    mid = 0.5 * (x2 + x3)
    stages = {0.0: x0, 0.5: mid, 1.0: x4}
    new = TrayState(x1, v1, tray.com.copy())
    return new, stages.__getitem__


def off_tray(p) -> bool:
    return abs(p[0]) > 0.5 * TRAY_LENGTH or abs(p[1]) > 0.5 * TRAY_WIDTH


def _quadratic_tilt(tilt_at):
    """Tilt over the step as the quadratic through the stage values."""
    a, m, b = (np.asarray(tilt_at(f), dtype=float) for f in (0.0, 0.5, 1.0))

    def q(s):
        return a * (2 * s - 1) * (s - 1) + m * 4 * s * (1 - s) + b * s * (2 * s - 1)

    return q


def _sub_tilt(q, s0, s1):
    return lambda f: q(s0 + f * (s1 - s0))


def advance_object(obj: ObjectState, cfg: ObjectConfig, tilt_at, tilt_end, dt: float):
    """Advance a tray-frame object over one step given the tilt profile.

    The contact regime is frozen over the step.  A sliding contact whose
    slip reverses or drops below ``V_STICK`` re-sticks at the end of the
    step if static friction can hold it; after a breakaway, re-sticking is
    disarmed until the slip exceeds ``RESTICK_HYSTERESIS * V_STICK``.
    """
    y = _object_vector(obj, cfg)
    sx, sy = y[2] - y[4], y[3] - y[5]
    slip = math.hypot(sx, sy)
    tilt0 = tilt_at(0.0)
    holds = can_stick(tilt0, cfg)
    armed = obj.restick_armed
    kind = EventKind.IN_CONTACT
    if obj.stuck:
        stuck = holds
        if not holds:
            kind = EventKind.STICKING_TO_SLIDING
            armed = False
    else:
        stuck = holds and armed and slip < V_STICK
        if stuck:
            kind = EventKind.SLIDING_TO_STICKING

    if stuck:
        y = _restick(y, cfg)
    if stuck and not can_stick(tilt_end, cfg):
        # breakaway inside the step: stick up to the cone crossing, then slide
        q = _quadratic_tilt(tilt_at)
        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if can_stick(q(mid), cfg) else (lo, mid)
        y = _rk4_object(y, cfg, True, _sub_tilt(q, 0.0, hi), hi * dt)
        stuck, armed = False, False
        kind = EventKind.STICKING_TO_SLIDING
        slip = 0.0
        y1 = _rk4_object(y, cfg, False, _sub_tilt(q, hi, 1.0), (1.0 - hi) * dt)
    else:
        y1 = _rk4_object(y, cfg, stuck, tilt_at, dt)

    if not stuck:
        nsx, nsy = y1[2] - y1[4], y1[3] - y1[5]
        nslip = math.hypot(nsx, nsy)
        reversed_ = slip > 0.0 and nsx * sx + nsy * sy <= 0.0
        if armed and (reversed_ or nslip < V_STICK) and can_stick(tilt_end, cfg):
            y1 = _restick(y1, cfg)
            stuck = True
            kind = EventKind.SLIDING_TO_STICKING
        elif nslip > RESTICK_HYSTERESIS * V_STICK:
            armed = True

    rx, ry = cfg.rolling_axes
    r = cfg.half_extent
    new = obj.copy()
    new.p = np.array([y1[0], y1[1], obj.p[2]])
    new.v = np.array([y1[2], y1[3], 0.0])
    new.w = np.array([-y1[5] / r if ry else 0.0, y1[4] / r if rx else 0.0, 0.0])
    new.theta = obj.theta + 0.5 * dt * (obj.w + new.w)
    new.stuck = stuck
    new.restick_armed = armed
    return new, kind


def _restick(y, cfg: ObjectConfig):
    """Project onto zero slip, conserving momentum about the contact point."""
    k = cfg.inertia_factor
    out = list(y)
    for i, rolls in enumerate(cfg.rolling_axes):
        if rolls:
            common = (y[2 + i] + k * y[4 + i]) / (1.0 + k)
            out[2 + i] = out[4 + i] = common
        else:
            out[2 + i] = 0.0
    return out


def step_plant(
    obj: ObjectState,
    tray: TrayState,
    u: TiltCommand,
    dt: float,
    cfg: ObjectConfig,
    tier: Tier | str = Tier.IDEAL_SERVO,
    servo: ServoParams = ServoParams(),
    arms=None,
):
    """Advance object and tray by one step.

    ``arms`` is the dual-arm actuator (``dualarm.DualArmActuator``) and is
    required for the ``DualArm`` tier.  World-frame input states are
    returned in the world frame.
    """
    tier = Tier(tier)
    in_world = obj.frame is Frame.WORLD
    if in_world:
        obj = transform_state(obj, Frame.TRAY, tray)
    ua = np.array([u.alpha, u.beta])
    if tier is Tier.IDEAL_SERVO:
        new_tray, tilt_at = servo_step(tray, ua, dt, servo.omega)
    else:
        if arms is None:
            raise ValueError("dual-arm tier needs an actuator")
        new_tray = arms.step(ua, dt)
        t0, t1 = tray.tilt.copy(), new_tray.tilt.copy()

        def tilt_at(f):
            return t0 + f * (t1 - t0)

    new_obj, kind = advance_object(obj, cfg, tilt_at, new_tray.tilt, dt)
    if not (new_obj.is_finite() and np.all(np.isfinite(new_tray.tilt))):
        raise NonFinite("plant integration diverged")
    if off_tray(new_obj.p):
        kind = EventKind.FELL_OFF_TRAY
    if in_world:
        new_obj = transform_state(new_obj, Frame.WORLD, new_tray)
    return new_obj, new_tray, PlantEvent(kind)


def mechanical_energy(obj: ObjectState, tray: TrayState, cfg: ObjectConfig) -> float:
    """Kinetic plus potential energy of the object in the world frame."""
    world = obj if obj.frame is Frame.WORLD else transform_state(obj, Frame.WORLD, tray)
    k = cfg.inertia_factor
    ke = 0.5 * cfg.mass * float(world.v @ world.v)
    ke += 0.5 * k * cfg.mass * cfg.half_extent**2 * float(world.w @ world.w)
    return ke + cfg.mass * G * float(world.p[2])
