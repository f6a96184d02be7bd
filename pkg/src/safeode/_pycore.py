"""Pure-Python implementations of the numerical kernels.

These are the reference versions of the routines in ``_core.pyx``; both
expose the same functions with the same signatures and return values.
``safeode.core`` picks the compiled module when it is importable.
"""

from __future__ import annotations

import math

import numpy as np

from . import dual as dn
from .dual import Dual

QP_OK = 0
QP_INFEASIBLE = 1
QP_MAXITER = 2
QP_DEGENERATE = 3

FEAS_TOL = 1e-8
DUP_TOL = 1e-10
LAM_TOL = 1e-10


# --------------------------------------------------------------------------
# small dense QP:  min ||x - y||^2  s.t.  A x + c >= 0
# --------------------------------------------------------------------------

def qp_solve(y, A, c, tol=FEAS_TOL, max_iter=64):
    """Dual active-set (Goldfarb-Idnani) projection onto a polyhedron.

    Returns ``(x, lam, working, status, worst)``. ``lam`` satisfies
    ``2 (x - y) = A^T lam``; ``working`` flags the rows in the final working
    set; ``worst`` is the most violated row when the problem is infeasible.
    """
    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, y.shape[0])
    c = np.asarray(c, dtype=float)
    m = c.shape[0]
    x = y.copy()
    lam = np.zeros(m)
    working = np.zeros(m, dtype=bool)
    active: list[int] = []
    u: list[float] = []
    worst = -1
    for _ in range(max_iter):
        s = A @ x + c
        if m == 0:
            return x, lam, working, QP_OK, -1
        p = int(np.argmin(s))
        if s[p] >= -tol:
            for j, uj in zip(active, u):
                lam[j] = uj
                working[j] = True
            return x, lam, working, QP_OK, -1
        worst = p
        ap = A[p]
        u_plus = u + [0.0]
        while True:
            if active:
                N = A[active].T
                r = np.linalg.solve(N.T @ N, N.T @ ap)
                z = 0.5 * (ap - N @ r)
            else:
                r = np.zeros(0)
                z = 0.5 * ap
            t1 = math.inf
            k = -1
            for j in range(len(active)):
                if r[j] > DUP_TOL:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            zn = float(z @ ap)
            if zn > DUP_TOL * max(1.0, float(ap @ ap)):
                t2 = -(float(ap @ x) + c[p]) / zn
            else:
                t2 = math.inf
            t = min(t1, t2)
            if math.isinf(t):
                return x, lam, working, QP_INFEASIBLE, p
            for j in range(len(active)):
                u_plus[j] -= t * r[j]
            u_plus[-1] += t
            if math.isinf(t2):
                del active[k]
                del u_plus[k]
                continue
            x = x + t * z
            if t2 <= t1:
                active.append(p)
                u = u_plus
                break
            del active[k]
            del u_plus[k]
    return x, lam, working, QP_MAXITER, worst


def qp_backward(A, x, lam, g, lam_tol=LAM_TOL):
    """Vector-Jacobian product of the QP solution map.

    Only rows with ``lam > lam_tol`` take part; weakly active rows are
    treated as inactive. Returns ``(dy, dA, dc, status)``.
    """
    A = np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    q = x.shape[0]
    A = A.reshape(-1, q)
    m = A.shape[0]
    dA = np.zeros((m, q))
    dc = np.zeros(m)
    act = np.flatnonzero(np.asarray(lam) > lam_tol)
    if act.size == 0:
        return g.copy(), dA, dc, QP_OK
    if act.size > q:
        return g.copy(), dA, dc, QP_DEGENERATE
    Aw = A[act]
    M = Aw @ Aw.T
    if act.size == 2:
        # reject nearly parallel active rows (conditioning guard)
        dmax = max(M[0, 0], M[1, 1])
        if abs(M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]) < 1e-12 * dmax * dmax:
            return g.copy(), dA, dc, QP_DEGENERATE
    try:
        w = -np.linalg.solve(M, Aw @ g)
    except np.linalg.LinAlgError:
        return g.copy(), dA, dc, QP_DEGENERATE
    dy = g + Aw.T @ w
    lw = np.asarray(lam)[act]
    dA[act] = 0.5 * np.outer(lw, dy) + np.outer(w, x)
    dc[act] = w
    return dy, dA, dc, QP_OK


def qp_solve_batch(Y, A, C, tol=FEAS_TOL, max_iter=64):
    Y = np.asarray(Y, dtype=float)
    B, q = Y.shape
    m = C.shape[1]
    X = np.empty((B, q))
    LAM = np.empty((B, m))
    W = np.empty((B, m), dtype=bool)
    status = np.empty(B, dtype=np.int64)
    worst = np.empty(B, dtype=np.int64)
    for i in range(B):
        X[i], LAM[i], W[i], status[i], worst[i] = qp_solve(Y[i], A[i], C[i], tol, max_iter)
    return X, LAM, W, status, worst


def qp_backward_batch(A, X, LAM, G, lam_tol=LAM_TOL):
    B, q = X.shape
    m = LAM.shape[1]
    DY = np.empty((B, q))
    DA = np.empty((B, m, q))
    DC = np.empty((B, m))
    status = np.empty(B, dtype=np.int64)
    for i in range(B):
        DY[i], DA[i], DC[i], status[i] = qp_backward(A[i], X[i], LAM[i], G[i], lam_tol)
    return DY, DA, DC, status


# --------------------------------------------------------------------------
# bicycle + moving disk: lifted barrier row and its Jacobian
# --------------------------------------------------------------------------

def _row_terms(x, y, th, v, u1, u2, p1, p2, t, obs, l):
    cx, cy, r, yoff, vx, vy = obs
    ex = x - cx - vx * t
    ey = y - (cy - yoff) - vy * t
    s, co = dn.sin(th), dn.cos(th)
    tu = dn.tan(u1)
    om = v * tu / l
    dex = v * co - vx
    dey = v * s - vy
    ddx = u2 * co - v * om * s
    ddy = u2 * s + v * om * co
    b = ex * ex + ey * ey - r * r
    bd = 2.0 * (ex * dex + ey * dey)
    bdd = 2.0 * (dex * dex + dey * dey) + 2.0 * (ex * ddx + ey * ddy)
    d3x = -3.0 * u2 * om * s - v * om * om * co
    d3y = 3.0 * u2 * om * co - v * om * om * s
    bddd0 = 6.0 * (dex * ddx + dey * ddy) + 2.0 * (ex * d3x + ey * d3y)
    k1 = v * v * (1.0 + tu * tu) / l
    a1 = 2.0 * k1 * (ey * co - ex * s)
    a2 = 2.0 * (ex * co + ey * s)
    psi1 = bd + p1 * b
    psi2 = bdd + (p1 + p2) * bd + p1 * p2 * b
    dpsi2 = bddd0 + (p1 + p2) * bdd + p1 * p2 * bd
    return a1, a2, dpsi2, b, psi1, psi2


def bicycle_row(z, t, obs, wheelbase, p1, p2, k):
    """Lifted HOCBF row ``a . u_dot + c >= 0`` for the bicycle and a disk.

    ``z = (x, y, theta, v, u1, u2)``, ``obs = (cx, cy, r, y_off, vx, vy)``.
    Returns ``(a, c, psi, jac)`` with ``psi = (b, psi1, psi2)`` and ``jac``
    the (3, 8) Jacobian of ``(a1, a2, c)`` with respect to
    ``(x, y, theta, v, u1, u2, p1, p2)``; ``dc/dk`` equals ``psi[2]``.
    """
    tag = dn.new_tag()
    eye = np.eye(8)
    args = [Dual(float(z[i]), eye[i], tag) for i in range(6)]
    args.append(Dual(float(p1), eye[6], tag))
    args.append(Dual(float(p2), eye[7], tag))
    a1, a2, dpsi2, b, psi1, psi2 = _row_terms(*args, float(t), tuple(obs), float(wheelbase))
    c = dpsi2 + k * psi2
    a = np.array([a1.val, a2.val])
    jac = np.vstack([a1.eps, a2.eps, c.eps])
    psi = np.array([b.val, psi1.val, psi2.val])
    return a, float(c.val), psi, jac


def bicycle_row_batch(Z, T, OBS, wheelbase, p1, p2, k):
    Z = np.asarray(Z, dtype=float)
    B = Z.shape[0]
    T = np.broadcast_to(np.asarray(T, dtype=float), (B,))
    OBS = np.broadcast_to(np.asarray(OBS, dtype=float), (B, 6))
    Aout = np.empty((B, 2))
    Cout = np.empty(B)
    PSI = np.empty((B, 3))
    JAC = np.empty((B, 3, 8))
    for i in range(B):
        Aout[i], Cout[i], PSI[i], JAC[i] = bicycle_row(Z[i], T[i], OBS[i], wheelbase, p1, p2, k)
    return Aout, Cout, PSI, JAC


def barrier_values(Z, T, OBS, wheelbase, p1, p2):
    """(b, psi1, psi2) rows for a batch of augmented states, no derivatives."""
    Z = np.asarray(Z, dtype=float)
    B = Z.shape[0]
    T = np.broadcast_to(np.asarray(T, dtype=float), (B,))
    OBS = np.broadcast_to(np.asarray(OBS, dtype=float), (B, 6))
    out = np.empty((B, 3))
    for i in range(B):
        terms = _row_terms(*Z[i], p1, p2, T[i], tuple(OBS[i]), wheelbase)
        out[i] = terms[3:]
    return out


# --------------------------------------------------------------------------
# LiDAR ray casting against one oriented rectangle
# --------------------------------------------------------------------------

def lidar_scan(ex, ey, eth, cx, cy, ch, length, width, n_rays, max_range):
    ang = eth + 2.0 * np.pi * np.arange(n_rays) / n_rays
    dx, dy = np.cos(ang), np.sin(ang)
    # ray in the rectangle's body frame
    ch_c, ch_s = math.cos(ch), math.sin(ch)
    ox, oy = ex - cx, ey - cy
    bx = ch_c * ox + ch_s * oy
    by = -ch_s * ox + ch_c * oy
    rdx = ch_c * dx + ch_s * dy
    rdy = -ch_s * dx + ch_c * dy
    hx, hy = 0.5 * length, 0.5 * width
    tmin = np.zeros(n_rays)
    tmax = np.full(n_rays, np.inf)
    hit = np.ones(n_rays, dtype=bool)
    for o, d, h in ((bx, rdx, hx), (by, rdy, hy)):
        small = np.abs(d) < 1e-15
        hit &= ~(small & (abs(o) > h))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo = np.where(small, -np.inf, np.minimum(t1, t2))
        hi = np.where(small, np.inf, np.maximum(t1, t2))
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    hit &= tmin <= tmax
    out = np.where(hit, tmin, max_range)
    return np.minimum(out, max_range)


# --------------------------------------------------------------------------
# single-shooting NMPC: RK4 rollout, penalised cost and its gradient
# --------------------------------------------------------------------------

def _flow(s, u1, u2, l):
    th, v = s[2], s[3]
    return np.array([v * math.cos(th), v * math.sin(th), v * math.tan(u1) / l, u2])


def _flow_jac(s, u1, u2, l):
    th, v = s[2], s[3]
    Js = np.zeros((4, 4))
    Js[0, 2] = -v * math.sin(th)
    Js[0, 3] = math.cos(th)
    Js[1, 2] = v * math.cos(th)
    Js[1, 3] = math.sin(th)
    tu = math.tan(u1)
    Js[2, 3] = tu / l
    Ju = np.zeros((4, 2))
    Ju[2, 0] = v * (1.0 + tu * tu) / l
    Ju[3, 1] = 1.0
    return Js, Ju


def shoot_rollout(s0, U, dt, wheelbase):
    U = np.asarray(U, dtype=float).reshape(-1, 2)
    H = U.shape[0]
    S = np.empty((H + 1, 4))
    S[0] = s0
    for i in range(H):
        s = S[i]
        u1, u2 = U[i]
        k1 = _flow(s, u1, u2, wheelbase)
        k2 = _flow(s + 0.5 * dt * k1, u1, u2, wheelbase)
        k3 = _flow(s + 0.5 * dt * k2, u1, u2, wheelbase)
        k4 = _flow(s + dt * k3, u1, u2, wheelbase)
        S[i + 1] = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return S


def shoot_cost_grad(U, s0, t0, obs, dt, wheelbase, w1, w2, p0, y_lane, v_des, rho, eps):
    """Penalised single-shooting cost and its gradient in ``U`` (flat, H*2).

    cost = dt * sum(w1 u1^2 + w2 u2^2)
         + p0 * ((y_H - y_lane)^2 + theta_H^2 + (v_H - v_des)^2)
         + rho * sum_k max(0, eps - b(s_k, t_k))^2      (k = 1..H)
    """
    U = np.asarray(U, dtype=float).reshape(-1, 2)
    H = U.shape[0]
    l = wheelbase
    cx, cy, r, yoff, vx, vy = obs
    S = np.empty((H + 1, 4))
    S[0] = s0
    stages = []
    for i in range(H):
        s = S[i]
        u1, u2 = U[i]
        z1 = s
        k1 = _flow(z1, u1, u2, l)
        z2 = s + 0.5 * dt * k1
        k2 = _flow(z2, u1, u2, l)
        z3 = s + 0.5 * dt * k2
        k3 = _flow(z3, u1, u2, l)
        z4 = s + dt * k3
        k4 = _flow(z4, u1, u2, l)
        S[i + 1] = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        stages.append((z1, z2, z3, z4))
    J = dt * float(np.sum(w1 * U[:, 0] ** 2 + w2 * U[:, 1] ** 2))
    sH = S[H]
    J += p0 * ((sH[1] - y_lane) ** 2 + sH[2] ** 2 + (sH[3] - v_des) ** 2)
    sbar = np.zeros((H + 1, 4))
    sbar[H, 1] += 2.0 * p0 * (sH[1] - y_lane)
    sbar[H, 2] += 2.0 * p0 * sH[2]
    sbar[H, 3] += 2.0 * p0 * (sH[3] - v_des)
    for i in range(1, H + 1):
        t = t0 + i * dt
        ex = S[i, 0] - cx - vx * t
        ey = S[i, 1] - (cy - yoff) - vy * t
        viol = eps - (ex * ex + ey * ey - r * r)
        if viol > 0.0:
            J += rho * viol * viol
            sbar[i, 0] += -2.0 * rho * viol * 2.0 * ex
            sbar[i, 1] += -2.0 * rho * viol * 2.0 * ey
    grad = np.zeros((H, 2))
    grad[:, 0] = 2.0 * dt * w1 * U[:, 0]
    grad[:, 1] = 2.0 * dt * w2 * U[:, 1]
    for i in range(H - 1, -1, -1):
        u1, u2 = U[i]
        z1, z2, z3, z4 = stages[i]
        g = sbar[i + 1]
        kb1 = dt / 6.0 * g
        kb2 = dt / 3.0 * g
        kb3 = dt / 3.0 * g
        kb4 = dt / 6.0 * g
        sb = g.copy()
        ub = np.zeros(2)
        Js, Ju = _flow_jac(z4, u1, u2, l)
        zb = Js.T @ kb4
        ub += Ju.T @ kb4
        sb += zb
        kb3 = kb3 + dt * zb
        Js, Ju = _flow_jac(z3, u1, u2, l)
        zb = Js.T @ kb3
        ub += Ju.T @ kb3
        sb += zb
        kb2 = kb2 + 0.5 * dt * zb
        Js, Ju = _flow_jac(z2, u1, u2, l)
        zb = Js.T @ kb2
        ub += Ju.T @ kb2
        sb += zb
        kb1 = kb1 + 0.5 * dt * zb
        Js, Ju = _flow_jac(z1, u1, u2, l)
        sb += Js.T @ kb1
        ub += Ju.T @ kb1
        sbar[i] += sb
        grad[i] += ub
    return J, grad.reshape(-1)
