"""Nonlinear MPC by direct multiple shooting and Gauss-Newton SQP.

Decision variables are the shooting states ``X_0..X_N`` and the commands
``u_0..u_{N-1}``; ``u_N`` is pinned to ``u_{N-1}``.  Each SQP iteration
linearises the transition map, condenses the state increments out of the
QP and solves the remaining command QP (box and rate constraints) with the
dense active-set solver in :mod:`dualtray.qp`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _kernels, qp
from .nominal import NU, NX, T_S, FeatureResidual, NominalParams, param_vector, phi, phi_jacobians

NE = 4  # tracked error: position and velocity


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


class MpcInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class MpcSpec:
    N: int = 20
    T_s: float = T_S
    Q_p: np.ndarray = field(default_factory=lambda: 250.0 * np.eye(2))
    Q_v: np.ndarray = field(default_factory=lambda: 2.0 * np.eye(2))
    Q_N: np.ndarray | None = None  # 4x4 over (p, v) or 8x8 over the full state
    terminal: str = "lqr"  # used when Q_N is None: "lqr" or "scaled" (10 Q)
    lqr_q_v: float | None = None  # velocity weight of the cost-to-go design; None = Q_v
    Q_R: np.ndarray = field(default_factory=lambda: 0.2 * np.eye(4))
    u_max: float = 0.6  # [rad]
    du_max: float = 0.01  # [rad / step]
    nu_min: float = -0.3  # [m/s]
    nu_max: float = 0.3
    w_nu: float = 1e3  # velocity-bound penalty weight
    max_iter: int = 50
    kkt_tol: float = 1e-6
    defect_tol: float = 1e-8  # shooting defects required at convergence

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("horizon must be at least one step")
        for name in ("Q_p", "Q_v", "Q_R"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.terminal not in ("scaled", "lqr"):
            raise ValueError(f"unknown terminal cost {self.terminal!r}")
        if self.Q_N is None and self.terminal == "scaled":
            object.__setattr__(self, "Q_N", 10.0 * self.Q)
        elif self.Q_N is not None:
            object.__setattr__(self, "Q_N", np.asarray(self.Q_N, dtype=float))
            if self.Q_N.shape not in ((NE, NE), (NX, NX)):
                raise ValueError("Q_N must be 4x4 or 8x8")
        for name in ("Q_p", "Q_v", "Q_N", "Q_R"):
            M = getattr(self, name)
            if M is None:
                continue
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")

    @property
    def Q(self) -> np.ndarray:
        Q = np.zeros((NE, NE))
        Q[:2, :2] = self.Q_p
        Q[2:, 2:] = self.Q_v
        return Q


def pad_state_weight(M: np.ndarray) -> np.ndarray:
    """Embed a (p, v) weight into the full 8-state error."""
    M = np.asarray(M, dtype=float)
    if M.shape == (NX, NX):
        return M
    out = np.zeros((NX, NX))
    out[:NE, :NE] = M
    return out


def dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Structured doubling: quadratic convergence, only small dense inverses.
    """
    n = A.shape[0]
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    I = np.eye(n)
    for _ in range(max_iter):
        Winv = np.linalg.inv(I + Gk @ Hk)
        A_next = Ak @ Winv @ Ak
        G_next = Gk + Ak @ Winv @ Gk @ Ak.T
        H_next = Hk + Ak.T @ Hk @ Winv @ Ak
        done = np.max(np.abs(H_next - Hk)) <= tol * max(1.0, np.max(np.abs(H_next)))
        Ak, Gk, Hk = A_next, 0.5 * (G_next + G_next.T), 0.5 * (H_next + H_next.T)
        if done:
            return Hk
    raise np.linalg.LinAlgError("Riccati doubling did not converge")


_LQR_CACHE: dict = {}


def lqr_terminal(spec: MpcSpec, params: NominalParams) -> np.ndarray:
    """Infinite-horizon cost-to-go of the reduced model linearised at rest.

    Friction and the velocity penalty are dropped (friction only helps to
    stop the object), the stage weights are the MPC's own, and the command
    weight is the ``u`` block of ``Q_R``.
    """
    # only the servo and the rolling geometry survive the linearisation
    free = NominalParams(
        servo_omega=params.servo_omega,
        inertia_factor=params.inertia_factor,
        rolling_axes=params.rolling_axes,
        nominal_friction=False,
    )
    key = (free, spec.T_s, spec.Q_p.tobytes(), spec.Q_v.tobytes(), spec.Q_R.tobytes(), spec.lqr_q_v)
    hit = _LQR_CACHE.get(key)
    if hit is not None:
        return hit
    A, B, _ = phi_jacobians(np.zeros(NX), np.zeros(NU), None, free, spec.T_s)
    Q = pad_state_weight(spec.Q)
    if spec.lqr_q_v is not None:
        Q[2:4, 2:4] = spec.lqr_q_v * np.eye(2)
    P = dare(A, B, Q, spec.Q_R[:NU, :NU])
    if len(_LQR_CACHE) > 256:
        _LQR_CACHE.clear()
    _LQR_CACHE[key] = P
    return P


def terminal_weight(spec: MpcSpec, params: NominalParams) -> np.ndarray:
    """Full-state terminal weight used by the solver."""
    if spec.Q_N is not None:
        return pad_state_weight(spec.Q_N)
    return lqr_terminal(spec, params)


def stage_cost(e, u, du, spec: MpcSpec) -> float:
    """``e' diag(Q_p, Q_v) e + [u; du]' Q_R [u; du]`` for one stage."""
    e = np.asarray(e, dtype=float)
    z = np.concatenate([np.asarray(u, dtype=float), np.asarray(du, dtype=float)])
    return float(e @ spec.Q @ e + z @ spec.Q_R @ z)


def delta_u(u_seq, u_prev) -> np.ndarray:
    """Command increments, the first one taken against ``u_prev``."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, NU)
    prev = np.vstack([np.asarray(u_prev, dtype=float).reshape(1, NU), u_seq[:-1]])
    return u_seq - prev


@dataclass
class MpcProblem:
    x0: np.ndarray
    x_ref: np.ndarray
    u_prev: np.ndarray
    spec: MpcSpec
    params: NominalParams
    # residual acceleration: a fixed 6-vector or a callable of velocity (K, 2) -> (K, 6)
    residual: Callable | np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float).reshape(NX)
        self.x_ref = np.asarray(self.x_ref, dtype=float).reshape(NX)
        self.u_prev = np.asarray(self.u_prev, dtype=float).reshape(NU)


@dataclass
class MpcSolution:
    u_seq: np.ndarray  # (N+1, 2)
    x_seq: np.ndarray  # (N+1, 8)
    cost: float
    kkt_residual: float
    iterations: int
    status: Status
    active: list[int] = field(default_factory=list)
    merit_history: list[float] = field(default_factory=list)

    @property
    def max_defect(self) -> float:
        return float(getattr(self, "_defect", 0.0))


# ---------------------------------------------------------------------------
# condensed problem pieces


def _rate_matrix(N: int) -> np.ndarray:
    """Maps stacked commands U (2N) to stacked increments (first uses u_prev = 0)."""
    D = np.eye(NU * N)
    D[NU:, :-NU] -= np.eye(NU * (N - 1))
    return D


def _velocity_excess(v: np.ndarray, spec: MpcSpec) -> np.ndarray:
    return np.maximum(v - spec.nu_max, 0.0) + np.minimum(v - spec.nu_min, 0.0)


def total_cost(problem: MpcProblem, X: np.ndarray, U: np.ndarray) -> float:
    """Objective at shooting states ``X`` (N+1, 8) and commands ``U`` (N, 2)."""
    spec = problem.spec
    E = X - problem.x_ref
    Q = pad_state_weight(spec.Q)
    J = float(np.einsum("ki,ij,kj->", E[:-1], Q, E[:-1]))
    QN = terminal_weight(spec, problem.params)
    J += float(E[-1] @ QN @ E[-1])
    Z = np.hstack([U, delta_u(U, problem.u_prev)])
    J += float(np.einsum("ki,ij,kj->", Z, spec.Q_R, Z))
    exc = _velocity_excess(X[1:, 2:4], spec)
    J += spec.w_nu * float(np.sum(exc * exc))
    return J


def _kernel_residual(residual) -> np.ndarray | None:
    """Kernel layout of a residual source, or None if it needs the AD path."""
    if residual is None:
        return FeatureResidual().vector()
    if isinstance(residual, FeatureResidual):
        return residual.vector()
    if callable(residual):
        return None
    return FeatureResidual.constant(residual).vector()


def _fast(problem: MpcProblem):
    rv = _kernel_residual(problem.residual)
    if rv is None:
        return None
    return param_vector(problem.params), rv


def rollout(problem: MpcProblem, U: np.ndarray) -> np.ndarray:
    """Single-shooting state trajectory for commands ``U`` (N, 2)."""
    U = np.ascontiguousarray(U, dtype=float)
    fast = _fast(problem)
    if fast is not None:
        return _kernels.rollout(problem.x0, U, fast[0], fast[1], problem.spec.T_s)
    X = np.zeros((U.shape[0] + 1, NX))
    X[0] = problem.x0
    for k in range(U.shape[0]):
        X[k + 1] = phi(X[k], U[k], problem.residual, problem.params, problem.spec.T_s)
    return X


def _linearize(problem: MpcProblem, X: np.ndarray, U: np.ndarray):
    """Stage Jacobians and shooting defects at (X, U)."""
    fast = _fast(problem)
    if fast is not None:
        return _kernels.linearize(np.ascontiguousarray(X), np.ascontiguousarray(U), fast[0], fast[1], problem.spec.T_s)
    A, B, F = phi_jacobians(X[:-1], U, problem.residual, problem.params, problem.spec.T_s)
    return A, B, F - X[1:]


def _defects(problem: MpcProblem, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    fast = _fast(problem)
    if fast is not None:
        return _kernels.defects(np.ascontiguousarray(X), np.ascontiguousarray(U), fast[0], fast[1], problem.spec.T_s)
    return phi(X[:-1], U, problem.residual, problem.params, problem.spec.T_s) - X[1:]


@dataclass
class _Condensed:
    H: np.ndarray
    g: np.ndarray
    Gx: np.ndarray  # (N+1, 8, 2N): state increment sensitivity to dU
    cx: np.ndarray  # (N+1, 8): state increment at dU = 0


_COMMAND_HESSIANS: dict = {}


def _command_hessian(spec: MpcSpec, N: int):
    """Blocks of the command-cost Hessian (cached per weight matrix)."""
    key = (N, spec.Q_R.tobytes())
    hit = _COMMAND_HESSIANS.get(key)
    if hit is not None:
        return hit
    D = _rate_matrix(N)
    QR = spec.Q_R
    I = np.eye(N)
    Huu = np.kron(I, QR[:NU, :NU])
    Hud = np.kron(I, QR[:NU, NU:])
    Hdd = np.kron(I, QR[NU:, NU:])
    Hu = Huu + Hud @ D + D.T @ Hud.T + D.T @ Hdd @ D
    hit = (D, Huu, Hud, Hdd, Hu)
    if len(_COMMAND_HESSIANS) > 64:
        _COMMAND_HESSIANS.clear()
    _COMMAND_HESSIANS[key] = hit
    return hit


def _condense(problem: MpcProblem, X, U, A, B, d) -> _Condensed:
    spec = problem.spec
    N = U.shape[0]
    Gx, cx = _kernels.condense_states(
        np.ascontiguousarray(A), np.ascontiguousarray(B), np.ascontiguousarray(d), problem.x0 - X[0]
    )
    W = np.empty((N + 1, NX, NX))
    W[:N] = pad_state_weight(spec.Q)
    W[N] = terminal_weight(spec, problem.params)
    W[0] = 0.0  # the initial state is fixed
    E = X + cx - problem.x_ref
    H, g = _kernels.tracking_hessian(Gx, np.ascontiguousarray(E), W)

    # command terms: Z_k = [u_k; du_k] with du = D U - (u_prev, 0, ...)
    D, Huu, Hud, Hdd, Hu = _command_hessian(spec, N)
    Ucol = U.reshape(-1)
    du = D @ Ucol
    du[:NU] -= problem.u_prev
    H += 2.0 * Hu
    g += 2.0 * (Huu @ Ucol + Hud @ du + D.T @ (Hud.T @ Ucol + Hdd @ du))

    # velocity-bound penalty, Gauss-Newton on the hinge residual
    V = X[1:, 2:4] + cx[1:, 2:4]
    exc = _velocity_excess(V, spec)
    act = exc != 0.0
    if np.any(act):
        Gv = Gx[1:, 2:4, :]
        Gva = Gv * act[:, :, None]
        H += 2.0 * spec.w_nu * np.einsum("kim,kin->mn", Gva, Gva)
        g += 2.0 * spec.w_nu * np.einsum("kin,ki->n", Gva, exc)
    return _Condensed(H=0.5 * (H + H.T), g=g, Gx=Gx, cx=cx)


def _command_constraints(problem: MpcProblem, N: int):
    """``A U <= b`` for the command box and the rate bounds."""
    spec = problem.spec
    n = NU * N
    D = _rate_matrix(N)
    I = np.eye(n)
    A = np.vstack([I, -I, D, -D])
    ub = np.full(n, spec.u_max)
    rate_hi = np.full(n, spec.du_max)
    rate_lo = np.full(n, spec.du_max)
    rate_hi[:NU] += problem.u_prev
    rate_lo[:NU] -= problem.u_prev
    b = np.concatenate([ub, ub, rate_hi, rate_lo])
    return A, b


def _feasible_start(problem: MpcProblem, U: np.ndarray) -> np.ndarray:
    """Project a command guess onto the box and rate constraints."""
    spec = problem.spec
    out = np.empty_like(U)
    prev = problem.u_prev
    for k in range(U.shape[0]):
        step = np.clip(U[k] - prev, -spec.du_max, spec.du_max)
        out[k] = np.clip(prev + step, -spec.u_max, spec.u_max)
        # clipping to the box can only move toward prev's side when prev is inside
        prev = out[k]
    return out


def check_bounds(problem: MpcProblem) -> None:
    spec = problem.spec
    if spec.u_max < 0 or spec.du_max < 0:
        raise MpcInfeasible("negative command or rate bound")
    if spec.nu_min > spec.nu_max:
        raise MpcInfeasible("velocity bounds are contradictory")
    if np.any(np.abs(problem.u_prev) > spec.u_max + spec.du_max + 1e-12):
        raise MpcInfeasible("previous command cannot reach the command box within one rate step")


def _max_defect(problem: MpcProblem, X, U) -> float:
    return float(np.max(np.abs(_defects(problem, X, U))))


def solve(problem: MpcProblem, warm_start: MpcSolution | None = None, max_iter: int | None = None) -> MpcSolution:
    """Solve the MPC problem; always returns commands satisfying the bounds."""
    spec = problem.spec
    N = spec.N
    max_iter = spec.max_iter if max_iter is None else max_iter
    try:
        check_bounds(problem)
    except MpcInfeasible:
        U = np.repeat(problem.u_prev[None, :], N, axis=0)
        return MpcSolution(
            u_seq=np.vstack([U, U[-1:]]),
            x_seq=np.repeat(problem.x0[None, :], N + 1, axis=0),
            cost=np.inf,
            kkt_residual=np.inf,
            iterations=0,
            status=Status.INFEASIBLE,
        )

    working: list[int] = []
    if warm_start is not None:
        U = np.vstack([warm_start.u_seq[1:N], warm_start.u_seq[N - 1 : N]])
        X = np.vstack([warm_start.x_seq[1:], warm_start.x_seq[-1:]])
        X[0] = problem.x0
        working = _shift_working(warm_start.active, N)
    else:
        U = np.repeat(problem.u_prev[None, :], N, axis=0)
        X = None
    U = _feasible_start(problem, U)
    if X is None or X.shape != (N + 1, NX):
        X = rollout(problem, U)
    X[0] = problem.x0

    A_c, b_c = _command_constraints(problem, N)
    fast = _fast(problem)
    if fast is not None:
        sol = _solve_compiled(problem, X, U, working, A_c, b_c, max_iter, fast)
    else:
        sol = _solve_python(problem, X, U, working, A_c, b_c, max_iter)
    sol.u_seq = _project_commands(sol.u_seq, problem.u_prev, problem.spec)
    sol._defect = _max_defect(problem, sol.x_seq, sol.u_seq[:N])
    # report the trajectory the commands actually produce under the model
    sol.x_seq = rollout(problem, sol.u_seq[:N])
    sol.cost = total_cost(problem, sol.x_seq, sol.u_seq[:N])
    return sol


def _project_commands(U: np.ndarray, u_prev, spec: MpcSpec) -> np.ndarray:
    """Clamp QP roundoff so the amplitude and rate boxes hold exactly."""
    out = np.array(U, dtype=float)
    prev = np.asarray(u_prev, dtype=float)
    for k in range(len(out)):
        lo = np.maximum(prev - spec.du_max, -spec.u_max)
        hi = np.minimum(prev + spec.du_max, spec.u_max)
        out[k] = np.clip(out[k], lo, hi)
        # prev + du_max may round so that the difference exceeds du_max
        for j in range(NU):
            while abs(out[k, j] - prev[j]) > spec.du_max:
                out[k, j] = np.nextafter(out[k, j], prev[j])
        prev = out[k]
    return out


_RHO = 1e3  # exact-penalty weight on the shooting defects


def _solve_compiled(problem, X, U, working, A_c, b_c, max_iter, fast) -> MpcSolution:
    spec = problem.spec
    N = spec.N
    D, Huu, Hud, Hdd, Hu = _command_hessian(spec, N)
    X, U, W, it, code, kkt, hist = _kernels.sqp(
        problem.x0, problem.x_ref, problem.u_prev, np.ascontiguousarray(X), np.ascontiguousarray(U),
        np.asarray(working, dtype=np.int64), fast[0], fast[1], spec.T_s, pad_state_weight(spec.Q), terminal_weight(spec, problem.params), spec.Q_R,
        Hu, D, Huu, Hud, Hdd, A_c, b_c, spec.nu_min, spec.nu_max, spec.w_nu, max_iter, spec.kkt_tol, spec.defect_tol, _RHO,
    )
    return MpcSolution(
        u_seq=np.vstack([U, U[-1:]]),
        x_seq=X,
        cost=total_cost(problem, X, U),
        kkt_residual=float(kkt),
        iterations=int(it),
        status=Status.CONVERGED if code == 0 else Status.MAX_ITER,
        active=[int(i) for i in W],
        merit_history=[float(h) for h in hist],
    )


def _solve_python(problem, X, U, working, A_c, b_c, max_iter) -> MpcSolution:
    """Reference SQP loop; also serves residual sources the kernels cannot take."""
    spec = problem.spec
    N = spec.N
    rho = _RHO
    status = Status.MAX_ITER
    kkt = np.inf
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        A, B, d = _linearize(problem, X, U)
        cond = _condense(problem, X, U, A, B, d)
        Ucol = U.reshape(-1)
        res = qp.solve(cond.H, cond.g - cond.H @ Ucol, A_c, b_c, Ucol, working=working)
        # the QP was posed in absolute commands; the step is the difference
        dU = res.x - Ucol
        working = res.active
        dX = cond.cx + cond.Gx @ dU
        defect = float(np.max(np.abs(d))) if N else 0.0
        kkt = max(float(np.max(np.abs(cond.H @ dU))), defect)
        merit0 = total_cost(problem, X, U) + rho * float(np.sum(np.abs(d)))
        if not history:
            history.append(merit0)
        if kkt < spec.kkt_tol and defect < spec.defect_tol:
            status = Status.CONVERGED
            break
        # backtracking on the l1 merit function
        t = 1.0
        directional = float(cond.g @ dU) - rho * float(np.sum(np.abs(d)))
        while True:
            Xn = X + t * dX
            Un = (Ucol + t * dU).reshape(N, NU)
            dn = _defects(problem, Xn, Un)
            merit = total_cost(problem, Xn, Un) + rho * float(np.sum(np.abs(dn)))
            if merit <= merit0 + 1e-4 * t * min(directional, 0.0) or t < 1e-4:
                break
            t *= 0.5
        if merit > merit0 and t < 1e-4:
            status = Status.MAX_ITER
            break
        X, U = Xn, Un
        history.append(merit)

    cost = total_cost(problem, X, U)
    sol = MpcSolution(
        u_seq=np.vstack([U, U[-1:]]),
        x_seq=X,
        cost=cost,
        kkt_residual=kkt,
        iterations=it,
        status=status,
        active=working,
        merit_history=history,
    )
    return sol


def _shift_working(active: list[int], N: int) -> list[int]:
    """Shift a working set by one stage (rows grouped as 4 blocks of 2N)."""
    n = NU * N
    out = []
    for i in active:
        block, j = divmod(i, n)
        if j >= NU:
            out.append(block * n + j - NU)
    return out


@dataclass
class MpcController:
    """Receding-horizon wrapper holding ``u_prev`` and the warm start."""

    spec: MpcSpec
    params: NominalParams
    x_ref: np.ndarray
    u_prev: np.ndarray = field(default_factory=lambda: np.zeros(NU))
    warm: MpcSolution | None = None
    last: MpcSolution | None = None
    max_iter: int | None = None

    def __post_init__(self) -> None:
        self.x_ref = np.asarray(self.x_ref, dtype=float).reshape(NX)
        self.u_prev = np.asarray(self.u_prev, dtype=float).reshape(NU)

    def set_params(self, params: NominalParams) -> None:
        self.params = params

    def step(self, x: np.ndarray, residual=None) -> np.ndarray:
        """Solve at the measured state and return the command to apply."""
        problem = MpcProblem(x, self.x_ref, self.u_prev, self.spec, self.params, residual)
        try:
            sol = solve(problem, self.warm, self.max_iter)
        except (FloatingPointError, np.linalg.LinAlgError, qp.QpInfeasible):
            sol = None
        if sol is None or sol.status is Status.INFEASIBLE or sol.iterations == 0 or not np.all(np.isfinite(sol.u_seq)):
            self.last = sol
            self.warm = None
            return self.u_prev.copy()
        self.last = sol
        self.warm = sol
        u = sol.u_seq[0].copy()
        self.u_prev = u
        return u


def mpc_step(controller: MpcController, x: np.ndarray, residual=None) -> np.ndarray:
    return controller.step(x, residual)


def with_spec(spec: MpcSpec, **kw) -> MpcSpec:
    return replace(spec, **kw)
