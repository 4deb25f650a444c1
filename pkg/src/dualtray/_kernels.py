"""Compiled inner loops for the MPC: reduced-model RK4 with analytic
Jacobians, condensing, and the dense active-set QP.

The pure-numpy implementations in :mod:`dualtray.nominal` (forward-mode AD)
and the reference formulas in the tests serve as oracles for these kernels.

Parameter vector layout (``pvec``)::

    0 mass  1 mu_c  2 mu_s (== mu_c disables the bump)  3 v_s  4 viscous
    5 servo omega  6 tanh epsilon  7 friction on/off  8 inertia factor
    9 rolls along x  10 rolls along y

Residual vector layout (``rvec``)::

    0-1 constant bias (x, y)  2-4 x-axis feature weights  5-7 y-axis
    feature weights  8 feature epsilon

The residual is evaluated at the step-start velocity and held over the step.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

G = 9.81
NX = 8
NU = 2


SPEED_FLOOR = 1e-6


@njit(cache=True)
def _deriv(s, u, r, p, f, J):
    """Continuous-time derivative ``f`` and its state Jacobian ``J`` (8x8)."""
    ca = math.cos(s[4])
    sa = math.sin(s[4])
    cb = math.cos(s[5])
    sb = math.sin(s[5])
    g = np.array([-G * ca * sb, -G * sa])
    # partials of the tangential gravity by (alpha, beta)
    dg = np.array([[G * sa * sb, -G * ca * cb], [-G * ca, 0.0]])
    gn = G * ca * cb
    dgn_a = -G * sa * cb
    dgn_b = -G * ca * sb
    roll = (p[9] > 0.5, p[10] > 0.5)
    v = s[2:4]
    q = SPEED_FLOOR * SPEED_FLOOR
    for i in range(2):
        if not roll[i]:
            q += v[i] * v[i]
    sigma = math.sqrt(q)
    # friction on sliding axis i is F_i = mu(q) gn T(q) v_i, T = tanh(sigma/eps)/sigma
    mu = 0.0
    dmu_q = 0.0
    T = 0.0
    dT_q = 0.0
    if p[7] > 0.5:
        mu = p[1]
        if p[2] != p[1]:
            e = math.exp(-q / (p[3] * p[3]))
            mu += (p[2] - p[1]) * e
            dmu_q = -(p[2] - p[1]) * e / (p[3] * p[3])
        th = math.tanh(sigma / p[6])
        T = th / sigma
        dT_sigma = ((1.0 - th * th) / p[6] * sigma - th) / (sigma * sigma)
        dT_q = dT_sigma / (2.0 * sigma)
    J[:, :] = 0.0
    for i in range(2):
        if roll[i]:
            sc = 1.0 / (1.0 + p[8])
            f[2 + i] = g[i] * sc + r[i]
            J[2 + i, 4] = dg[i, 0] * sc
            J[2 + i, 5] = dg[i, 1] * sc
            continue
        F = mu * gn * T * v[i]
        f[2 + i] = g[i] - F - p[4] / p[0] * v[i] + r[i]
        for j in range(2):
            if roll[j]:
                continue
            d = gn * v[i] * (dmu_q * T + mu * dT_q) * 2.0 * v[j]
            if i == j:
                d += mu * gn * T + p[4] / p[0]
            J[2 + i, 2 + j] = -d
        J[2 + i, 4] = dg[i, 0] - mu * T * v[i] * dgn_a
        J[2 + i, 5] = dg[i, 1] - mu * T * v[i] * dgn_b
    w = p[5]
    w2 = w * w
    f[0] = s[2]
    f[1] = s[3]
    f[4] = s[6]
    f[5] = s[7]
    f[6] = w2 * (u[0] - s[4]) - 2.0 * w * s[6]
    f[7] = w2 * (u[1] - s[5]) - 2.0 * w * s[7]
    J[0, 2] = 1.0
    J[1, 3] = 1.0
    J[4, 6] = 1.0
    J[5, 7] = 1.0
    J[6, 4] = -w2
    J[6, 6] = -2.0 * w
    J[7, 5] = -w2
    J[7, 7] = -2.0 * w


@njit(cache=True)
def residual_eval(v, rv):
    """Residual (x, y) at velocity ``v`` and its diagonal velocity slopes."""
    out = np.empty(2)
    slope = np.empty(2)
    eps = rv[8]
    for i in range(2):
        z0 = rv[2 + 3 * i]
        z1 = rv[3 + 3 * i]
        z2 = rv[4 + 3 * i]
        th = math.tanh(v[i] / eps)
        out[i] = rv[i] + z0 * v[i] + z1 * th + z2
        slope[i] = z0 + z1 * (1.0 - th * th) / eps
    return out, slope


@njit(cache=True)
def step_jac(s, u, p, rv, dt, out, A, B):
    """RK4 step of the reduced model with its Jacobians.

    Writes the next state into ``out`` and ``dPhi/ds``, ``dPhi/du`` into
    ``A`` (8x8) and ``B`` (8x2).
    """
    r, slope = residual_eval(s[2:4], rv)
    f = np.empty(NX)
    J = np.empty((NX, NX))
    S = np.zeros((NX, NX + NU))  # stage-state sensitivity to (s, u)
    acc = np.zeros((NX, NX + NU))
    K = np.empty((NX, NX + NU))
    st = s.copy()
    accf = np.zeros(NX)
    for i in range(NX):
        S[i, i] = 1.0
    coef_next = (0.5, 0.5, 1.0, 0.0)
    coef_sum = (1.0, 2.0, 2.0, 1.0)
    for stage in range(4):
        _deriv(st, u, r, p, f, J)
        # K = J S + [0 | du] + residual slope on the start velocity
        for i in range(NX):
            for j in range(NX + NU):
                acc_ij = 0.0
                for m in range(NX):
                    acc_ij += J[i, m] * S[m, j]
                K[i, j] = acc_ij
        w2 = p[5] * p[5]
        K[6, NX] += w2
        K[7, NX + 1] += w2
        K[2, 2] += slope[0]
        K[3, 3] += slope[1]
        c = coef_sum[stage]
        for i in range(NX):
            accf[i] += c * f[i]
            for j in range(NX + NU):
                acc[i, j] += c * K[i, j]
        cn = coef_next[stage]
        if cn > 0.0:
            for i in range(NX):
                st[i] = s[i] + cn * dt * f[i]
                for j in range(NX + NU):
                    S[i, j] = (1.0 if i == j else 0.0) + cn * dt * K[i, j]
    h6 = dt / 6.0
    for i in range(NX):
        out[i] = s[i] + h6 * accf[i]
        for j in range(NX):
            A[i, j] = (1.0 if i == j else 0.0) + h6 * acc[i, j]
        B[i, 0] = h6 * acc[i, NX]
        B[i, 1] = h6 * acc[i, NX + 1]


@njit(cache=True)
def step(s, u, p, rv, dt):
    """RK4 step without Jacobians."""
    r, _ = residual_eval(s[2:4], rv)
    f = np.empty(NX)
    J = np.empty((NX, NX))
    k_sum = np.zeros(NX)
    st = s.copy()
    coef_next = (0.5, 0.5, 1.0, 0.0)
    coef_sum = (1.0, 2.0, 2.0, 1.0)
    for stage in range(4):
        _deriv(st, u, r, p, f, J)
        for i in range(NX):
            k_sum[i] += coef_sum[stage] * f[i]
        cn = coef_next[stage]
        if cn > 0.0:
            for i in range(NX):
                st[i] = s[i] + cn * dt * f[i]
    out = np.empty(NX)
    for i in range(NX):
        out[i] = s[i] + dt / 6.0 * k_sum[i]
    return out


@njit(cache=True)
def linearize(X, U, p, rv, dt):
    """Stage Jacobians and shooting defects ``Phi(X_k, U_k) - X_{k+1}``."""
    N = U.shape[0]
    A = np.empty((N, NX, NX))
    B = np.empty((N, NX, NU))
    d = np.empty((N, NX))
    nxt = np.empty(NX)
    for k in range(N):
        step_jac(X[k], U[k], p, rv, dt, nxt, A[k], B[k])
        for i in range(NX):
            d[k, i] = nxt[i] - X[k + 1, i]
    return A, B, d


@njit(cache=True)
def defects(X, U, p, rv, dt):
    N = U.shape[0]
    d = np.empty((N, NX))
    for k in range(N):
        nxt = step(X[k], U[k], p, rv, dt)
        for i in range(NX):
            d[k, i] = nxt[i] - X[k + 1, i]
    return d


@njit(cache=True)
def rollout(x0, U, p, rv, dt):
    N = U.shape[0]
    X = np.empty((N + 1, NX))
    X[0] = x0
    for k in range(N):
        X[k + 1] = step(X[k], U[k], p, rv, dt)
    return X


@njit(cache=True)
def condense_states(A, B, d, c0):
    """Sensitivities ``Gx`` (N+1, 8, 2N) and offsets ``cx`` of the state increments."""
    N = A.shape[0]
    n = NU * N
    Gx = np.zeros((N + 1, NX, n))
    cx = np.zeros((N + 1, NX))
    cx[0] = c0
    for k in range(N):
        for i in range(NX):
            acc = d[k, i]
            for m in range(NX):
                acc += A[k, i, m] * cx[k, m]
            cx[k + 1, i] = acc
            # only columns of earlier stages are nonzero in Gx[k]
            for j in range(NU * k):
                acc = 0.0
                for m in range(NX):
                    acc += A[k, i, m] * Gx[k, m, j]
                Gx[k + 1, i, j] = acc
            Gx[k + 1, i, NU * k] = B[k, i, 0]
            Gx[k + 1, i, NU * k + 1] = B[k, i, 1]
    return Gx, cx


@njit(cache=True)
def tracking_hessian(Gx, E, W):
    """``H = 2 sum Ge' W Ge`` and ``g = 2 sum Ge' W e`` over the tracked rows."""
    Np1, _, n = Gx.shape
    ne = W.shape[1]
    H = np.zeros((n, n))
    g = np.zeros(n)
    WG = np.empty((ne, n))
    for k in range(1, Np1):
        ncol = min(n, NU * k)  # Gx[k] is zero beyond stage k-1
        for i in range(ne):
            for j in range(ncol):
                acc = 0.0
                for m in range(ne):
                    acc += W[k, i, m] * Gx[k, m, j]
                WG[i, j] = acc
        for a in range(ncol):
            for i in range(ne):
                g[a] += 2.0 * WG[i, a] * E[k, i]
            for b in range(a, ncol):
                acc = 0.0
                for i in range(ne):
                    acc += Gx[k, i, a] * WG[i, b]
                H[a, b] += 2.0 * acc
    for a in range(n):
        for b in range(a + 1, n):
            H[b, a] = H[a, b]
    return H, g


# ---------------------------------------------------------------------------
# active-set QP


@njit(cache=True)
def _chol_inverse(H):
    L = np.linalg.cholesky(H)
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


@njit(cache=True)
def _eqp(Hinv, grad, A, W, m):
    """Step and multipliers of ``min 0.5 p'Hp + grad'p s.t. A[W] p = 0``.

    Returns ``ok = False`` when the working rows are numerically dependent.
    """
    n = Hinv.shape[0]
    hg = Hinv @ grad
    if m == 0:
        return -hg, np.zeros(0), True
    Aw = np.empty((m, n))
    for i in range(m):
        Aw[i] = A[W[i]]
    HA = Hinv @ Aw.T  # n x m
    S = Aw @ HA
    rhs = -(Aw @ hg)
    # Cholesky with a pivot check doubles as the independence test
    Lc = np.zeros((m, m))
    scale = 0.0
    for i in range(m):
        scale = max(scale, S[i, i])
    for j in range(m):
        acc = S[j, j]
        for k in range(j):
            acc -= Lc[j, k] * Lc[j, k]
        if acc <= 1e-12 * max(scale, 1e-300):
            return np.zeros(n), np.zeros(m), False
        Lc[j, j] = math.sqrt(acc)
        for i in range(j + 1, m):
            acc = S[i, j]
            for k in range(j):
                acc -= Lc[i, k] * Lc[j, k]
            Lc[i, j] = acc / Lc[j, j]
    y = np.empty(m)
    for i in range(m):
        acc = rhs[i]
        for k in range(i):
            acc -= Lc[i, k] * y[k]
        y[i] = acc / Lc[i, i]
    lam = np.empty(m)
    for i in range(m - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, m):
            acc -= Lc[k, i] * lam[k]
        lam[i] = acc / Lc[i, i]
    p = -hg - HA @ lam
    return p, lam, True


@njit(cache=True)
def active_set(H, g, A, b, x0, W0, max_iter, tol):
    """Primal active-set iterations from the feasible point ``x0``.

    ``W0`` seeds the working set (indices not active at ``x0`` or linearly
    dependent are skipped).  Returns ``(x, W, lam_w, iterations, converged)``.
    """
    n = H.shape[0]
    nc = A.shape[0]
    Hinv = _chol_inverse(H)
    x = x0.copy()
    bmax = 0.0
    for i in range(nc):
        bmax = max(bmax, abs(b[i]))
    feas_tol = 1e-9 * (1.0 + bmax)
    W = np.empty(min(nc, n) + 1, dtype=np.int64)
    inW = np.zeros(nc, dtype=np.bool_)
    m = 0
    grad0 = H @ x + g
    for t in range(W0.shape[0]):
        i = W0[t]
        if i < 0 or i >= nc or inW[i] or m >= n:
            continue
        if abs(A[i] @ x - b[i]) > feas_tol:
            continue
        W[m] = i
        _, _, ok = _eqp(Hinv, grad0, A, W, m + 1)
        if ok:
            inW[i] = True
            m += 1
    lam = np.zeros(0)
    converged = False
    it = 0
    xscale = 0.0
    while it < max_iter:
        it += 1
        grad = H @ x + g
        p, lam, ok = _eqp(Hinv, grad, A, W, m)
        if not ok:
            # drop the most recently added row and retry
            m -= 1
            inW[W[m]] = False
            continue
        xscale = 0.0
        pmax = 0.0
        for i in range(n):
            xscale = max(xscale, abs(x[i]))
            pmax = max(pmax, abs(p[i]))
        if pmax <= tol * (1.0 + xscale):
            jmin = -1
            lmin = -1e-12
            for i in range(m):
                if lam[i] < lmin:
                    lmin = lam[i]
                    jmin = i
            if jmin < 0:
                converged = True
                break
            inW[W[jmin]] = False
            for i in range(jmin, m - 1):
                W[i] = W[i + 1]
            m -= 1
            continue
        alpha = 1.0
        block = -1
        for i in range(nc):
            if inW[i]:
                continue
            ap = A[i] @ p
            if ap > 1e-14:
                slack = b[i] - A[i] @ x
                if slack < 0.0:
                    slack = 0.0
                r = slack / ap
                if r < alpha:
                    alpha = r
                    block = i
        x = x + alpha * p
        if block >= 0 and m < n:
            W[m] = block
            inW[block] = True
            m += 1
    return x, W[:m].copy(), lam, it, converged


# ---------------------------------------------------------------------------
# full SQP loop


@njit(cache=True)
def _vel_excess(v, lo, hi):
    if v > hi:
        return v - hi
    if v < lo:
        return v - lo
    return 0.0


@njit(cache=True)
def total_cost(X, U, xref, uprev, Q, QN, QR, nu_lo, nu_hi, w_nu):
    N = U.shape[0]
    ne = Q.shape[0]
    J = 0.0
    e = np.empty(ne)
    for k in range(N + 1):
        for i in range(ne):
            e[i] = X[k, i] - xref[i]
        Wk = QN if k == N else Q
        for i in range(ne):
            for j in range(ne):
                J += e[i] * Wk[i, j] * e[j]
    z = np.empty(2 * NU)
    for k in range(N):
        for i in range(NU):
            z[i] = U[k, i]
            z[NU + i] = U[k, i] - (uprev[i] if k == 0 else U[k - 1, i])
        for i in range(2 * NU):
            for j in range(2 * NU):
                J += z[i] * QR[i, j] * z[j]
    for k in range(1, N + 1):
        for i in range(2):
            x = _vel_excess(X[k, 2 + i], nu_lo, nu_hi)
            J += w_nu * x * x
    return J


@njit(cache=True)
def sqp(x0, xref, uprev, X, U, W0, p, rv, dt, Q, QN, QR, Hu, D, Huu, Hud, Hdd,
        Ac, bc, nu_lo, nu_hi, w_nu, max_iter, kkt_tol, defect_tol, rho):
    """Gauss-Newton SQP on the condensed multiple-shooting problem.

    Mirrors ``nmpc._solve_python``.  Returns ``(X, U, working, iterations,
    status, kkt, history)`` with status 0 converged, 1 max-iter.
    """
    N = U.shape[0]
    n = NU * N
    ne = Q.shape[0]
    X = X.copy()
    U = U.copy()
    X[0] = x0
    W = W0.copy()
    Wt = np.empty((N + 1, ne, ne))
    for k in range(N):
        Wt[k] = Q
    Wt[N] = QN
    Wt[0] = 0.0
    history = np.full(max_iter + 1, np.nan)
    nh = 0
    status = 1
    kkt = np.inf
    it = 0
    Xn = np.empty_like(X)
    Un = np.empty_like(U)
    for it in range(1, max_iter + 1):
        A, B, d = linearize(X, U, p, rv, dt)
        c0 = x0 - X[0]
        Gx, cx = condense_states(A, B, d, c0)
        E = np.empty((N + 1, ne))
        for k in range(N + 1):
            for i in range(ne):
                E[k, i] = X[k, i] + cx[k, i] - xref[i]
        H, g = tracking_hessian(Gx, E, Wt)
        Ucol = U.reshape(n).copy()
        du = D @ Ucol
        du[0] -= uprev[0]
        du[1] -= uprev[1]
        H += 2.0 * Hu
        g += 2.0 * (Huu @ Ucol + Hud @ du + D.T @ (Hud.T @ Ucol + Hdd @ du))
        for k in range(1, N + 1):
            for i in range(2):
                ex = _vel_excess(X[k, 2 + i] + cx[k, 2 + i], nu_lo, nu_hi)
                if ex != 0.0:
                    row = Gx[k, 2 + i]
                    for a in range(n):
                        g[a] += 2.0 * w_nu * row[a] * ex
                        for b in range(n):
                            H[a, b] += 2.0 * w_nu * row[a] * row[b]
        for a in range(n):
            for b in range(a + 1, n):
                s = 0.5 * (H[a, b] + H[b, a])
                H[a, b] = s
                H[b, a] = s
        xq, W, _, _, _ = active_set(H, g - H @ Ucol, Ac, bc, Ucol, W, 200, 1e-12)
        dU = xq - Ucol
        dmax = 0.0
        dsum = 0.0
        for k in range(N):
            for i in range(NX):
                dmax = max(dmax, abs(d[k, i]))
                dsum += abs(d[k, i])
        Hd = H @ dU
        kkt = dmax
        for a in range(n):
            kkt = max(kkt, abs(Hd[a]))
        merit0 = total_cost(X, U, xref, uprev, Q, QN, QR, nu_lo, nu_hi, w_nu) + rho * dsum
        if nh == 0:
            history[0] = merit0
            nh = 1
        if kkt < kkt_tol and dmax < defect_tol:
            status = 0
            break
        directional = g @ dU - rho * dsum
        if directional > 0.0:
            directional = 0.0
        t = 1.0
        merit = merit0
        while True:
            for k in range(N + 1):
                for i in range(NX):
                    acc = cx[k, i]
                    for j in range(min(n, NU * k)):
                        acc += Gx[k, i, j] * dU[j]
                    Xn[k, i] = X[k, i] + t * acc
            for k in range(N):
                for i in range(NU):
                    Un[k, i] = U[k, i] + t * dU[NU * k + i]
            dn = defects(Xn, Un, p, rv, dt)
            ds = 0.0
            for k in range(N):
                for i in range(NX):
                    ds += abs(dn[k, i])
            merit = total_cost(Xn, Un, xref, uprev, Q, QN, QR, nu_lo, nu_hi, w_nu) + rho * ds
            if merit <= merit0 + 1e-4 * t * directional or t < 1e-4:
                break
            t *= 0.5
        if merit > merit0 and t < 1e-4:
            status = 1
            break
        X[:, :] = Xn
        U[:, :] = Un
        history[nh] = merit
        nh += 1
    return X, U, W, it, status, kkt, history[:nh].copy()


# ---------------------------------------------------------------------------
# planar RRR arm


@njit(cache=True)
def _arm_point(q, qd, L, base, link, d, pos, Jv, Jvd):
    phi = 0.0
    phid = 0.0
    pos[0] = base[0]
    pos[1] = base[1]
    Jv[:, :] = 0.0
    Jvd[:, :] = 0.0
    for l in range(link + 1):
        phi += q[l]
        phid += qd[l]
        r = L[l] if l < link else d
        c, s = math.cos(phi), math.sin(phi)
        pos[0] += r * c
        pos[1] += r * s
        for j in range(l + 1):
            Jv[0, j] += -r * s
            Jv[1, j] += r * c
            Jvd[0, j] += -r * c * phid
            Jvd[1, j] += -r * s * phid


@njit(cache=True)
def arm_dynamics(q, qd, L, m, inert, load_m, load_I, base, d, g):
    """Mass matrix, bias torque, task Jacobian (x, z, theta), its
    derivative and the grasp position of one planar RRR arm."""
    M = np.zeros((3, 3))
    h = np.zeros(3)
    pos = np.zeros(2)
    Jv = np.zeros((2, 3))
    Jvd = np.zeros((2, 3))
    for i in range(3):
        _arm_point(q, qd, L, base, i, 0.5 * L[i], pos, Jv, Jvd)
        a = Jvd @ qd
        for r in range(3):
            h[r] += m[i] * (Jv[0, r] * a[0] + Jv[1, r] * a[1] + g * Jv[1, r])
            for c in range(3):
                M[r, c] += m[i] * (Jv[0, r] * Jv[0, c] + Jv[1, r] * Jv[1, c])
                if r <= i and c <= i:
                    M[r, c] += inert[i]
    _arm_point(q, qd, L, base, 2, d, pos, Jv, Jvd)
    a = Jvd @ qd
    for r in range(3):
        h[r] += load_m * (Jv[0, r] * a[0] + Jv[1, r] * a[1] + g * Jv[1, r])
        for c in range(3):
            M[r, c] += load_m * (Jv[0, r] * Jv[0, c] + Jv[1, r] * Jv[1, c]) + load_I
    J = np.ones((3, 3))
    Jdot = np.zeros((3, 3))
    J[:2, :] = Jv
    Jdot[:2, :] = Jvd
    return 0.5 * (M + M.T), h, J, Jdot, pos


@njit(cache=True)
def _arm_accel(q, qd, tau, L, m, inert, load_m, load_I, base, d, g):
    M, h, _, _, _ = arm_dynamics(q, qd, L, m, inert, load_m, load_I, base, d, g)
    return np.linalg.solve(M, tau - h)


@njit(cache=True)
def arm_rk4(q, qd, tau, dt, L, m, inert, load_m, load_I, base, d, g):
    k1q = qd
    k1v = _arm_accel(q, qd, tau, L, m, inert, load_m, load_I, base, d, g)
    k2q = qd + 0.5 * dt * k1v
    k2v = _arm_accel(q + 0.5 * dt * k1q, k2q, tau, L, m, inert, load_m, load_I, base, d, g)
    k3q = qd + 0.5 * dt * k2v
    k3v = _arm_accel(q + 0.5 * dt * k2q, k3q, tau, L, m, inert, load_m, load_I, base, d, g)
    k4q = qd + dt * k3v
    k4v = _arm_accel(q + dt * k3q, k4q, tau, L, m, inert, load_m, load_I, base, d, g)
    return (
        q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q),
        qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
    )
