"""Recursive least squares identification of the model residual (RMPC).

Six independent scalar regressions, one per translational and rotational
axis, each over the features ``[v, tanh(v / eps), 1]`` of its own velocity.
The translational x/y predictions feed the MPC as a
:class:`~dualtray.nominal.FeatureResidual`; the others are kept for logging.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .dual import stack
from .nominal import FeatureResidual

P_CAP = 1e6


class AxisKind(str, enum.Enum):
    TRANSLATIONAL = "translational"
    ROTATIONAL = "rotational"


class CovarianceBlowup(FloatingPointError):
    pass


def features(v, epsilon: float):
    """``[v, tanh(v / eps), 1]``; works elementwise on arrays and Duals."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return stack([v, np.tanh(v / epsilon), 0.0 * v + 1.0])


def discrepancy(nu_k, nu_km1, a_bar, T_s: float) -> np.ndarray:
    """Finite-difference acceleration minus the nominal one."""
    if not T_s > 0:
        raise ValueError("T_s must be positive")
    nu_k = np.asarray(nu_k, dtype=float)
    nu_km1 = np.asarray(nu_km1, dtype=float)
    return (nu_k - nu_km1) / T_s - np.asarray(a_bar, dtype=float)


@dataclass
class RlsAxisState:
    z: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(3))
    kind: AxisKind = AxisKind.TRANSLATIONAL
    axis: str = "x"
    resets: int = 0
    updates: int = 0

    def copy(self) -> "RlsAxisState":
        return replace(self, z=self.z.copy(), P=self.P.copy())


def rls_update(
    state: RlsAxisState, phi, target: float, lam: float, p0: float = 10.0, strict: bool = False
) -> RlsAxisState:
    """One forgetting-factor RLS step; returns a new state.

    The covariance is symmetrised after the update.  If an eigenvalue
    exceeds ``P_CAP`` the covariance is reset to ``p0 I`` (counted in
    ``resets``), or :class:`CovarianceBlowup` is raised when ``strict``.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError("forgetting factor must lie in (0, 1]")
    phi = np.asarray(phi, dtype=float)
    P = state.P
    Pphi = P @ phi
    K = Pphi / (lam + phi @ Pphi)
    z = state.z + K * (target - phi @ state.z)
    P = (P - np.outer(K, Pphi)) / lam
    P = 0.5 * (P + P.T)
    out = replace(state, z=z, P=P, updates=state.updates + 1)
    if np.linalg.eigvalsh(P)[-1] > P_CAP:
        if strict:
            raise CovarianceBlowup(f"covariance eigenvalue above {P_CAP:g} on axis {state.axis}")
        out.P = p0 * np.eye(3)
        out.resets += 1
    return out


AXES = (
    (AxisKind.TRANSLATIONAL, "x"),
    (AxisKind.TRANSLATIONAL, "y"),
    (AxisKind.TRANSLATIONAL, "z"),
    (AxisKind.ROTATIONAL, "x"),
    (AxisKind.ROTATIONAL, "y"),
    (AxisKind.ROTATIONAL, "z"),
)


@dataclass
class RlsConfig:
    lam: float = 0.995
    p0: float = 10.0
    eps_t: float = 0.01  # [m/s]
    eps_r: float = 0.05  # [rad/s]
    v_gate: float = 1e-3  # [m/s] adaptation only above this speed
    residual_rollout: str = "feature"  # or "frozen"

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lam must lie in (0, 1]")
        if self.residual_rollout not in ("feature", "frozen"):
            raise ValueError("residual_rollout must be 'feature' or 'frozen'")
        if min(self.p0, self.eps_t, self.eps_r) <= 0:
            raise ValueError("p0 and smoothing scales must be positive")


@dataclass
class RlsBank:
    config: RlsConfig = field(default_factory=RlsConfig)
    axes: list[RlsAxisState] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self) -> None:
        if not self.axes:
            self.axes = [
                RlsAxisState(P=self.config.p0 * np.eye(3), kind=kind, axis=ax) for kind, ax in AXES
            ]

    @property
    def lam(self) -> float:
        return self.config.lam

    def epsilon(self, j: int) -> float:
        return self.config.eps_t if j < 3 else self.config.eps_r

    def update(self, nu_k, nu_km1, a_bar, T_s: float) -> bool:
        """Absorb one measured transition; returns False when gated off.

        ``nu`` are 6-vectors ``(v, w)`` and features use ``nu_km1``.
        """
        nu_km1 = np.asarray(nu_km1, dtype=float)
        if np.linalg.norm(nu_km1[:3]) <= self.config.v_gate:
            self.skipped += 1
            return False
        target = discrepancy(nu_k, nu_km1, a_bar, T_s)
        for j in range(6):
            phi = features(nu_km1[j], self.epsilon(j))
            self.axes[j] = rls_update(self.axes[j], phi, float(target[j]), self.config.lam, self.config.p0)
        return True

    @property
    def z(self) -> np.ndarray:
        return np.stack([a.z for a in self.axes])

    @property
    def P_diagonals(self) -> np.ndarray:
        return np.stack([np.diag(a.P) for a in self.axes])

    @property
    def resets(self) -> int:
        return sum(a.resets for a in self.axes)

    def residual_model(self, nu=None) -> FeatureResidual:
        """Residual source for the MPC.

        In ``feature`` mode the features are re-evaluated along the
        prediction; in ``frozen`` mode the residual at the measured
        velocity ``nu`` is held over the whole horizon.
        """
        if self.config.residual_rollout == "frozen":
            if nu is None:
                raise ValueError("frozen rollout needs the measured velocity")
            return FeatureResidual.constant(predict_residual(self, nu)[:2])
        zx, zy = self.axes[0].z, self.axes[1].z
        return FeatureResidual(zx=tuple(map(float, zx)), zy=tuple(map(float, zy)), epsilon=self.config.eps_t)


def predict_residual(bank: RlsBank, nu):
    """Six-vector residual at velocities ``nu`` (``(..., 6)``, Dual-friendly)."""
    parts = []
    for j, ax in enumerate(bank.axes):
        nj = nu[..., j]
        z = ax.z
        parts.append(z[0] * nj + z[1] * np.tanh(nj / bank.epsilon(j)) + z[2] * (0.0 * nj + 1.0))
    return stack(parts)
