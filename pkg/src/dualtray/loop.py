"""One closed loop: plant, tilt actuator, MPC and optional adapters.

Used by the benchmark runner and by the LMPC training environment, so both
see exactly the same measure -> adapt -> solve -> actuate sequence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dualarm import ArmModel, DualArmActuator, ImpedanceGains
from .nmpc import MpcController, MpcSpec
from .nominal import NX, FeatureResidual, NominalParams, from_plant, param_vector
from .plant import (
    EventKind,
    ObjectConfig,
    ObjectState,
    ServoParams,
    TiltCommand,
    Tier,
    TrayState,
    servo_accel,
    step_plant,
)
from .rls import RlsBank, RlsConfig

# equivalent tray inertia about the tilt axes for the servo effort proxy
SERVO_TRAY_INERTIA = 0.16  # [kg m^2]
_NO_RESIDUAL = FeatureResidual().vector()


class Controller(str, enum.Enum):
    PMPC = "PMPC"
    RMPC = "RMPC"
    LMPC = "LMPC"


@dataclass
class DualArmSettings:
    model: ArmModel = field(default_factory=ArmModel)
    gains: ImpedanceGains = field(default_factory=ImpedanceGains)
    torque_limits: str = "exact"


@dataclass
class StepRecord:
    t: float
    x: np.ndarray  # measured MPC state after the step
    u: np.ndarray
    event: EventKind
    cost: float
    kkt: float
    tau: np.ndarray
    q: np.ndarray | None = None
    qd: np.ndarray | None = None


def goal_state(goal) -> np.ndarray:
    x = np.zeros(NX)
    x[:2] = goal
    return x


class ClosedLoop:
    """Receding-horizon loop at the MPC rate ``spec.T_s``.

    ``params`` is the controller's nominal model (the plant always uses
    ``cfg``).  With ``rls`` given the loop runs RMPC; LMPC swaps the
    controller's parameters from outside through :meth:`set_params`.
    """

    def __init__(
        self,
        cfg: ObjectConfig,
        goal,
        params: NominalParams,
        spec: MpcSpec = MpcSpec(),
        tier: Tier | str = Tier.IDEAL_SERVO,
        servo: ServoParams = ServoParams(),
        rls: RlsConfig | None = None,
        dualarm: DualArmSettings | None = None,
    ) -> None:
        self.cfg = cfg
        self.goal = np.asarray(goal, dtype=float).reshape(2)
        self.spec = spec
        self.tier = Tier(tier)
        self.servo = servo
        self.obj = ObjectState.at_rest(cfg)
        self.tray = TrayState()
        self.mpc = MpcController(spec, params, goal_state(self.goal))
        self.bank = RlsBank(rls) if rls is not None else None
        self.arms = None
        if self.tier is Tier.DUAL_ARM:
            d = dualarm or DualArmSettings()
            self.arms = DualArmActuator(model=d.model, gains=d.gains, torque_limits=d.torque_limits)
        self.k = 0
        self.done = False
        self.x = from_plant(self.obj, self.tray)
        self._prev = None  # (x, u, nu) of the previous step for the RLS target

    @property
    def params(self) -> NominalParams:
        return self.mpc.params

    def set_params(self, params: NominalParams) -> None:
        self.mpc.set_params(params)

    def measured_nu(self) -> np.ndarray:
        return np.concatenate([self.obj.v, self.obj.w])

    def _adapt(self) -> None:
        if self.bank is None or self._prev is None:
            return
        x_prev, u_prev, nu_prev = self._prev
        # the model's own mean acceleration over the last step, residual-free
        x_next = _kernels.step(
            x_prev, u_prev, param_vector(self.params), _NO_RESIDUAL, self.spec.T_s
        )
        a_bar = np.zeros(6)
        a_bar[:2] = (x_next[2:4] - x_prev[2:4]) / self.spec.T_s
        self.bank.update(self.measured_nu(), nu_prev, a_bar, self.spec.T_s)

    def step(self) -> StepRecord:
        if self.done:
            raise RuntimeError("episode already terminated")
        self._adapt()
        residual = None
        if self.bank is not None:
            residual = self.bank.residual_model(self.measured_nu())
        x = self.x
        u = self.mpc.step(x, residual)
        sol = self.mpc.last
        cost = float(sol.cost) if sol is not None else float("nan")
        kkt = float(sol.kkt_residual) if sol is not None else float("nan")
        tray0 = self.tray
        nu_prev = self.measured_nu()
        self.obj, self.tray, ev = step_plant(
            self.obj, self.tray, TiltCommand.from_array(u), self.spec.T_s, self.cfg, self.tier, self.servo, self.arms
        )
        self.k += 1
        self._prev = (x, u.copy(), nu_prev)
        self.x = from_plant(self.obj, self.tray)
        if self.arms is not None:
            tau = self.arms.tau.copy()
            q, qd = self.arms.q.reshape(-1).copy(), self.arms.qd.reshape(-1).copy()
        else:
            tau = SERVO_TRAY_INERTIA * servo_accel(tray0.tilt, tray0.tilt_rate, u, self.servo.omega)
            q = qd = None
        if ev.terminal:
            self.done = True
        return StepRecord(self.k * self.spec.T_s, self.x.copy(), u.copy(), ev.kind, cost, kkt, tau, q, qd)
