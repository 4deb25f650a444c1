"""Episode metrics: steady-state error, settling time and control effort.

All three are pure functions of logged series, so recomputing them from a
trajectory CSV reproduces the in-run record exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

W_E = 1.0
W_R = 1e-6


def tail_start(n: int) -> int:
    """0-based index of the first sample with 1-based index ``i > 0.8 n``."""
    return (4 * n) // 5


def steady_state_error(errors) -> float:
    """Mean error norm over the last 20% of samples."""
    e = np.asarray(errors, dtype=float)
    if e.ndim == 2:
        e = np.linalg.norm(e, axis=1)
    if len(e) == 0:
        raise ValueError("empty error series")
    if len(e) < 5:
        return float(np.mean(e))
    return float(np.mean(e[tail_start(len(e)):]))


def steady_state_error_squared(errors) -> float:
    """Mean squared error norm over the same tail [m^2]."""
    e = np.asarray(errors, dtype=float)
    if e.ndim == 2:
        e = np.linalg.norm(e, axis=1)
    tail = e if len(e) < 5 else e[tail_start(len(e)):]
    return float(np.mean(tail * tail))


def settling_time(errors, e_ss: float, sample_rate: float, duration: float | None = None) -> float:
    """Time from which every later error stays within ``1.01 e_ss``.

    Sample ``i`` (0-based) maps to ``i / sample_rate``; if the last sample
    is outside the band the full duration is returned.
    """
    e = np.asarray(errors, dtype=float)
    if e.ndim == 2:
        e = np.linalg.norm(e, axis=1)
    if duration is None:
        duration = len(e) / sample_rate
    eps = 1.01 * abs(e_ss)
    outside = np.nonzero(e > eps)[0]
    if len(outside) == 0:
        return 0.0
    i_s = int(outside[-1]) + 1
    if i_s >= len(e):
        return float(duration)
    return i_s / sample_rate


def control_effort(tau, dt: float, w_E: float = W_E, w_R: float = W_R) -> float:
    """Energy plus rate cost of a torque series ``(n, k)``."""
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 1:
        tau = tau[:, None]
    energy = float(np.sum(tau * tau)) * dt
    rate = np.diff(tau, axis=0) / dt
    return w_E * energy + w_R * float(np.sum(rate * rate))


@dataclass
class MetricsRecord:
    settling_time: float
    steady_state_error: float
    steady_state_error_sq: float
    control_effort: float
    fell_off: bool
    samples: int
    mean_kkt: float = 0.0
    max_kkt: float = 0.0
    mean_cost: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def compute(positions, goal, tau, dt: float, duration: float, fell_off: bool,
            kkt=None, cost=None, w_E: float = W_E, w_R: float = W_R) -> MetricsRecord:
    """Metrics of one episode from its logged series."""
    p = np.asarray(positions, dtype=float)
    e = np.linalg.norm(p - np.asarray(goal, dtype=float), axis=1)
    ess = steady_state_error(e)
    kkt = np.asarray(kkt if kkt is not None else [0.0], dtype=float)
    cost = np.asarray(cost if cost is not None else [0.0], dtype=float)
    return MetricsRecord(
        settling_time=settling_time(e, ess, 1.0 / dt, duration),
        steady_state_error=ess,
        steady_state_error_sq=steady_state_error_squared(e),
        control_effort=control_effort(tau, dt, w_E, w_R),
        fell_off=bool(fell_off),
        samples=len(e),
        mean_kkt=float(np.nanmean(kkt)) if np.any(np.isfinite(kkt)) else float("nan"),
        max_kkt=float(np.nanmax(kkt)) if np.any(np.isfinite(kkt)) else float("nan"),
        mean_cost=float(np.nanmean(cost)) if np.any(np.isfinite(cost)) else float("nan"),
    )
