# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numerical kernels; same API as ``safeode._pycore``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, tan, fabs, INFINITY, isinf

cnp.import_array()

DEF MAXQ = 4
DEF MAXM = 12
DEF NT = 8

cdef int QP_OK = 0
cdef int QP_INFEASIBLE = 1
cdef int QP_MAXITER = 2
cdef int QP_DEGENERATE = 3

cdef double DUP_TOL = 1e-10


# ----------------------------------------------------------------------------
# tiny dense linear algebra
# ----------------------------------------------------------------------------

cdef int _solve_small(double* M, double* b, int n) noexcept nogil:
    """Gaussian elimination with partial pivoting, in place; solution in b."""
    cdef int i, j, k, piv
    cdef double mx, tmp, f
    for k in range(n):
        piv = k
        mx = fabs(M[k * n + k])
        for i in range(k + 1, n):
            if fabs(M[i * n + k]) > mx:
                mx = fabs(M[i * n + k])
                piv = i
        if mx < 1e-300:
            return 1
        if piv != k:
            for j in range(n):
                tmp = M[k * n + j]
                M[k * n + j] = M[piv * n + j]
                M[piv * n + j] = tmp
            tmp = b[k]
            b[k] = b[piv]
            b[piv] = tmp
        for i in range(k + 1, n):
            f = M[i * n + k] / M[k * n + k]
            for j in range(k, n):
                M[i * n + j] -= f * M[k * n + j]
            b[i] -= f * b[k]
    for i in range(n - 1, -1, -1):
        tmp = b[i]
        for j in range(i + 1, n):
            tmp -= M[i * n + j] * b[j]
        b[i] = tmp / M[i * n + i]
    return 0


cdef int _qp_solve_c(const double* y, const double* A, const double* c, int q, int m,
                     double tol, int max_iter, double* x, double* lam, int* working,
                     int* worst) noexcept nogil:
    cdef int active[MAXQ]
    cdef double u[MAXQ + 1]
    cdef double r[MAXQ]
    cdef double z[MAXQ]
    cdef double M[MAXQ * MAXQ]
    cdef int na = 0
    cdef int it, i, j, jj, p, k
    cdef double smin, sv, t1, t2, t, ratio, zn, apap, ax
    for i in range(q):
        x[i] = y[i]
    for j in range(m):
        lam[j] = 0.0
        working[j] = 0
    worst[0] = -1
    if m == 0:
        return QP_OK
    for it in range(max_iter):
        p = -1
        smin = 0.0
        for j in range(m):
            sv = c[j]
            for i in range(q):
                sv += A[j * q + i] * x[i]
            if p < 0 or sv < smin:
                smin = sv
                p = j
        if smin >= -tol:
            worst[0] = -1
            for jj in range(na):
                lam[active[jj]] = u[jj]
                working[active[jj]] = 1
            return QP_OK
        worst[0] = p
        u[na] = 0.0
        while True:
            # r = (N^T N)^-1 N^T a_p ;  z = 0.5 (a_p - N r)
            for jj in range(na):
                r[jj] = 0.0
                for i in range(q):
                    r[jj] += A[active[jj] * q + i] * A[p * q + i]
                for k in range(na):
                    M[jj * na + k] = 0.0
                    for i in range(q):
                        M[jj * na + k] += A[active[jj] * q + i] * A[active[k] * q + i]
            if na > 0:
                if _solve_small(M, r, na) != 0:
                    return QP_DEGENERATE
            for i in range(q):
                z[i] = A[p * q + i]
                for jj in range(na):
                    z[i] -= A[active[jj] * q + i] * r[jj]
                z[i] *= 0.5
            t1 = INFINITY
            k = -1
            for jj in range(na):
                if r[jj] > DUP_TOL:
                    ratio = u[jj] / r[jj]
                    if ratio < t1:
                        t1 = ratio
                        k = jj
            zn = 0.0
            apap = 0.0
            ax = c[p]
            for i in range(q):
                zn += z[i] * A[p * q + i]
                apap += A[p * q + i] * A[p * q + i]
                ax += A[p * q + i] * x[i]
            if zn > DUP_TOL * (apap if apap > 1.0 else 1.0):
                t2 = -ax / zn
            else:
                t2 = INFINITY
            t = t1 if t1 < t2 else t2
            if isinf(t):
                worst[0] = p
                return QP_INFEASIBLE
            for jj in range(na):
                u[jj] -= t * r[jj]
            u[na] += t
            if isinf(t2):
                for jj in range(k, na):
                    active[jj] = active[jj + 1] if jj + 1 < na else 0
                    u[jj] = u[jj + 1]
                na -= 1
                continue
            for i in range(q):
                x[i] += t * z[i]
            if t2 <= t1:
                active[na] = p
                na += 1
                break
            for jj in range(k, na):
                active[jj] = active[jj + 1] if jj + 1 < na else 0
                u[jj] = u[jj + 1]
            na -= 1
    return QP_MAXITER


def qp_solve(y, A, c, double tol=1e-8, int max_iter=64):
    cdef cnp.ndarray[double, ndim=1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef int q = yv.shape[0]
    cdef cnp.ndarray[double, ndim=2] Av = np.ascontiguousarray(np.asarray(A, dtype=np.float64).reshape(-1, q))
    cdef cnp.ndarray[double, ndim=1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef int m = cv.shape[0]
    if q > MAXQ or m > MAXM:
        from . import _pycore
        return _pycore.qp_solve(y, A, c, tol, max_iter)
    cdef cnp.ndarray[double, ndim=1] x = np.empty(q)
    cdef cnp.ndarray[double, ndim=1] lam = np.empty(m)
    cdef int wk[MAXM]
    cdef int worst = -1
    cdef int status
    cdef int j
    status = _qp_solve_c(&yv[0], &Av[0, 0] if m > 0 else NULL, &cv[0] if m > 0 else NULL,
                         q, m, tol, max_iter, &x[0], &lam[0] if m > 0 else NULL, wk, &worst)
    working = np.zeros(m, dtype=bool)
    for j in range(m):
        working[j] = wk[j] != 0
    return x, lam, working, status, worst


def qp_solve_batch(Y, A, C, double tol=1e-8, int max_iter=64):
    cdef cnp.ndarray[double, ndim=2] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef int B = Yv.shape[0]
    cdef int q = Yv.shape[1]
    cdef cnp.ndarray[double, ndim=3] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef int m = Cv.shape[1]
    if q > MAXQ or m > MAXM or m == 0:
        from . import _pycore
        return _pycore.qp_solve_batch(Y, A, C, tol, max_iter)
    cdef cnp.ndarray[double, ndim=2] X = np.empty((B, q))
    cdef cnp.ndarray[double, ndim=2] LAM = np.empty((B, m))
    cdef cnp.ndarray[cnp.int64_t, ndim=1] status = np.empty(B, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] worst = np.empty(B, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] W = np.zeros((B, m), dtype=np.uint8)
    cdef int wk[MAXM]
    cdef int wst
    cdef int i, j
    for i in range(B):
        status[i] = _qp_solve_c(&Yv[i, 0], &Av[i, 0, 0], &Cv[i, 0], q, m, tol, max_iter,
                                &X[i, 0], &LAM[i, 0], wk, &wst)
        worst[i] = wst
        for j in range(m):
            W[i, j] = wk[j]
    return X, LAM, W.astype(bool), status, worst


cdef int _qp_backward_c(const double* A, const double* x, const double* lam, const double* g,
                        int q, int m, double lam_tol, double* dy, double* dA,
                        double* dc) noexcept nogil:
    cdef int act[MAXM]
    cdef int na = 0
    cdef int i, j, k
    cdef double M[MAXM * MAXM]
    cdef double w[MAXM]
    cdef double diag_max = 0.0
    for j in range(m):
        dc[j] = 0.0
        for i in range(q):
            dA[j * q + i] = 0.0
        if lam[j] > lam_tol:
            act[na] = j
            na += 1
    for i in range(q):
        dy[i] = g[i]
    if na == 0:
        return QP_OK
    if na > q:
        return QP_DEGENERATE
    for j in range(na):
        w[j] = 0.0
        for i in range(q):
            w[j] += A[act[j] * q + i] * g[i]
        for k in range(na):
            M[j * na + k] = 0.0
            for i in range(q):
                M[j * na + k] += A[act[j] * q + i] * A[act[k] * q + i]
        if M[j * na + j] > diag_max:
            diag_max = M[j * na + j]
    if na == 2:
        # reject nearly parallel active rows (conditioning guard)
        if fabs(M[0] * M[3] - M[1] * M[2]) < 1e-12 * diag_max * diag_max:
            return QP_DEGENERATE
    if _solve_small(M, w, na) != 0:
        return QP_DEGENERATE
    for j in range(na):
        w[j] = -w[j]
    for i in range(q):
        for j in range(na):
            dy[i] += A[act[j] * q + i] * w[j]
    for j in range(na):
        dc[act[j]] = w[j]
        for i in range(q):
            dA[act[j] * q + i] = 0.5 * lam[act[j]] * dy[i] + w[j] * x[i]
    return QP_OK


def qp_backward(A, x, lam, g, double lam_tol=1e-10):
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int q = xv.shape[0]
    cdef cnp.ndarray[double, ndim=2] Av = np.ascontiguousarray(np.asarray(A, dtype=np.float64).reshape(-1, q))
    cdef cnp.ndarray[double, ndim=1] lv = np.ascontiguousarray(lam, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef int m = lv.shape[0]
    if q > MAXQ or m > MAXM or m == 0:
        from . import _pycore
        return _pycore.qp_backward(A, x, lam, g, lam_tol)
    cdef cnp.ndarray[double, ndim=1] dy = np.empty(q)
    cdef cnp.ndarray[double, ndim=2] dA = np.empty((m, q))
    cdef cnp.ndarray[double, ndim=1] dc = np.empty(m)
    cdef int status = _qp_backward_c(&Av[0, 0], &xv[0], &lv[0], &gv[0], q, m, lam_tol,
                                     &dy[0], &dA[0, 0], &dc[0])
    if status != QP_OK:
        return gv.copy(), np.zeros((m, q)), np.zeros(m), status
    return dy, dA, dc, status


def qp_backward_batch(A, X, LAM, G, double lam_tol=1e-10):
    cdef cnp.ndarray[double, ndim=2] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef int B = Xv.shape[0]
    cdef int q = Xv.shape[1]
    cdef cnp.ndarray[double, ndim=3] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Lv = np.ascontiguousarray(LAM, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef int m = Lv.shape[1]
    if q > MAXQ or m > MAXM or m == 0:
        from . import _pycore
        return _pycore.qp_backward_batch(A, X, LAM, G, lam_tol)
    cdef cnp.ndarray[double, ndim=2] DY = np.empty((B, q))
    cdef cnp.ndarray[double, ndim=3] DA = np.empty((B, m, q))
    cdef cnp.ndarray[double, ndim=2] DC = np.empty((B, m))
    cdef cnp.ndarray[cnp.int64_t, ndim=1] status = np.empty(B, dtype=np.int64)
    cdef int i, j, k
    for i in range(B):
        status[i] = _qp_backward_c(&Av[i, 0, 0], &Xv[i, 0], &Lv[i, 0], &Gv[i, 0], q, m,
                                   lam_tol, &DY[i, 0], &DA[i, 0, 0], &DC[i, 0])
        if status[i] != QP_OK:
            for k in range(q):
                DY[i, k] = Gv[i, k]
            for j in range(m):
                DC[i, j] = 0.0
                for k in range(q):
                    DA[i, j, k] = 0.0
    return DY, DA, DC, status


# ----------------------------------------------------------------------------
# forward-mode duals with a fixed tangent width, for the barrier row Jacobian
# ----------------------------------------------------------------------------

ctypedef struct D:
    double v
    double d[NT]


cdef inline D dconst(double a) noexcept nogil:
    cdef D r
    cdef int i
    r.v = a
    for i in range(NT):
        r.d[i] = 0.0
    return r


cdef inline D dvar(double a, int k) noexcept nogil:
    cdef D r = dconst(a)
    r.d[k] = 1.0
    return r


cdef inline D dadd(D a, D b) noexcept nogil:
    cdef int i
    a.v += b.v
    for i in range(NT):
        a.d[i] += b.d[i]
    return a


cdef inline D dsub(D a, D b) noexcept nogil:
    cdef int i
    a.v -= b.v
    for i in range(NT):
        a.d[i] -= b.d[i]
    return a


cdef inline D dmul(D a, D b) noexcept nogil:
    cdef D r
    cdef int i
    r.v = a.v * b.v
    for i in range(NT):
        r.d[i] = a.v * b.d[i] + a.d[i] * b.v
    return r


cdef inline D dscale(D a, double s) noexcept nogil:
    cdef int i
    a.v *= s
    for i in range(NT):
        a.d[i] *= s
    return a


cdef inline D dshift(D a, double s) noexcept nogil:
    a.v += s
    return a


cdef inline D dsin(D a) noexcept nogil:
    cdef D r
    cdef int i
    cdef double c = cos(a.v)
    r.v = sin(a.v)
    for i in range(NT):
        r.d[i] = c * a.d[i]
    return r


cdef inline D dcos(D a) noexcept nogil:
    cdef D r
    cdef int i
    cdef double s = -sin(a.v)
    r.v = cos(a.v)
    for i in range(NT):
        r.d[i] = s * a.d[i]
    return r


cdef inline D dtan(D a) noexcept nogil:
    cdef D r
    cdef int i
    cdef double t = tan(a.v)
    cdef double s = 1.0 + t * t
    r.v = t
    for i in range(NT):
        r.d[i] = s * a.d[i]
    return r


cdef void _row_c(const double* z, double t, const double* obs, double l, double p1v,
                 double p2v, double kk, double* a_out, double* c_out, double* psi_out,
                 double* jac) noexcept nogil:
    cdef D x = dvar(z[0], 0)
    cdef D y = dvar(z[1], 1)
    cdef D th = dvar(z[2], 2)
    cdef D v = dvar(z[3], 3)
    cdef D u1 = dvar(z[4], 4)
    cdef D u2 = dvar(z[5], 5)
    cdef D p1 = dvar(p1v, 6)
    cdef D p2 = dvar(p2v, 7)
    cdef double cx = obs[0], cy = obs[1], r = obs[2], yoff = obs[3]
    cdef double vx = obs[4], vy = obs[5]
    cdef D ex = dshift(x, -cx - vx * t)
    cdef D ey = dshift(y, -(cy - yoff) - vy * t)
    cdef D s = dsin(th)
    cdef D co = dcos(th)
    cdef D tu = dtan(u1)
    cdef D om = dscale(dmul(v, tu), 1.0 / l)
    cdef D dex = dshift(dmul(v, co), -vx)
    cdef D dey = dshift(dmul(v, s), -vy)
    cdef D vom = dmul(v, om)
    cdef D ddx = dsub(dmul(u2, co), dmul(vom, s))
    cdef D ddy = dadd(dmul(u2, s), dmul(vom, co))
    cdef D b = dshift(dadd(dmul(ex, ex), dmul(ey, ey)), -r * r)
    cdef D bd = dscale(dadd(dmul(ex, dex), dmul(ey, dey)), 2.0)
    cdef D bdd = dadd(dscale(dadd(dmul(dex, dex), dmul(dey, dey)), 2.0),
                      dscale(dadd(dmul(ex, ddx), dmul(ey, ddy)), 2.0))
    cdef D u2om = dmul(u2, om)
    cdef D vomom = dmul(vom, om)
    cdef D d3x = dsub(dscale(dmul(u2om, s), -3.0), dmul(vomom, co))
    cdef D d3y = dsub(dscale(dmul(u2om, co), 3.0), dmul(vomom, s))
    cdef D bddd0 = dadd(dscale(dadd(dmul(dex, ddx), dmul(dey, ddy)), 6.0),
                        dscale(dadd(dmul(ex, d3x), dmul(ey, d3y)), 2.0))
    cdef D k1 = dscale(dmul(dmul(v, v), dshift(dmul(tu, tu), 1.0)), 1.0 / l)
    cdef D a1 = dscale(dmul(k1, dsub(dmul(ey, co), dmul(ex, s))), 2.0)
    cdef D a2 = dscale(dadd(dmul(ex, co), dmul(ey, s)), 2.0)
    cdef D psum = dadd(p1, p2)
    cdef D pprod = dmul(p1, p2)
    cdef D psi1 = dadd(bd, dmul(p1, b))
    cdef D psi2 = dadd(dadd(bdd, dmul(psum, bd)), dmul(pprod, b))
    cdef D dpsi2 = dadd(dadd(bddd0, dmul(psum, bdd)), dmul(pprod, bd))
    cdef D cc = dadd(dpsi2, dscale(psi2, kk))
    cdef int i
    a_out[0] = a1.v
    a_out[1] = a2.v
    c_out[0] = cc.v
    psi_out[0] = b.v
    psi_out[1] = psi1.v
    psi_out[2] = psi2.v
    if jac != NULL:
        for i in range(NT):
            jac[i] = a1.d[i]
            jac[NT + i] = a2.d[i]
            jac[2 * NT + i] = cc.d[i]


def bicycle_row(z, double t, obs, double wheelbase, double p1, double p2, double k):
    cdef cnp.ndarray[double, ndim=1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] ov = np.ascontiguousarray(obs, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] a = np.empty(2)
    cdef cnp.ndarray[double, ndim=1] psi = np.empty(3)
    cdef cnp.ndarray[double, ndim=2] jac = np.empty((3, NT))
    cdef double c
    _row_c(&zv[0], t, &ov[0], wheelbase, p1, p2, k, &a[0], &c, &psi[0], &jac[0, 0])
    return a, c, psi, jac


def bicycle_row_batch(Z, T, OBS, double wheelbase, double p1, double p2, double k):
    cdef cnp.ndarray[double, ndim=2] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef int B = Zv.shape[0]
    cdef cnp.ndarray[double, ndim=1] Tv = np.ascontiguousarray(
        np.broadcast_to(np.asarray(T, dtype=np.float64), (B,)))
    cdef cnp.ndarray[double, ndim=2] Ov = np.ascontiguousarray(
        np.broadcast_to(np.asarray(OBS, dtype=np.float64), (B, 6)))
    cdef cnp.ndarray[double, ndim=2] Aout = np.empty((B, 2))
    cdef cnp.ndarray[double, ndim=1] Cout = np.empty(B)
    cdef cnp.ndarray[double, ndim=2] PSI = np.empty((B, 3))
    cdef cnp.ndarray[double, ndim=3] JAC = np.empty((B, 3, NT))
    cdef int i
    for i in range(B):
        _row_c(&Zv[i, 0], Tv[i], &Ov[i, 0], wheelbase, p1, p2, k, &Aout[i, 0], &Cout[i],
               &PSI[i, 0], &JAC[i, 0, 0])
    return Aout, Cout, PSI, JAC


def barrier_values(Z, T, OBS, double wheelbase, double p1, double p2):
    cdef cnp.ndarray[double, ndim=2] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef int B = Zv.shape[0]
    cdef cnp.ndarray[double, ndim=1] Tv = np.ascontiguousarray(
        np.broadcast_to(np.asarray(T, dtype=np.float64), (B,)))
    cdef cnp.ndarray[double, ndim=2] Ov = np.ascontiguousarray(
        np.broadcast_to(np.asarray(OBS, dtype=np.float64), (B, 6)))
    cdef cnp.ndarray[double, ndim=2] out = np.empty((B, 3))
    cdef double a[2]
    cdef double c
    cdef int i
    for i in range(B):
        _row_c(&Zv[i, 0], Tv[i], &Ov[i, 0], wheelbase, p1, p2, 0.0, a, &c, &out[i, 0], NULL)
    return out


# ----------------------------------------------------------------------------
# LiDAR
# ----------------------------------------------------------------------------

def lidar_scan(double ex, double ey, double eth, double cx, double cy, double ch,
               double length, double width, int n_rays, double max_range):
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n_rays)
    cdef double chc = cos(ch), chs = sin(ch)
    cdef double ox = ex - cx, oy = ey - cy
    cdef double bx = chc * ox + chs * oy
    cdef double by = -chs * ox + chc * oy
    cdef double hx = 0.5 * length, hy = 0.5 * width
    cdef double ang, dx, dy, rdx, rdy, tmin, tmax, t1, t2, tmp
    cdef int k
    cdef bint hit
    cdef double pi2 = 6.283185307179586
    for k in range(n_rays):
        ang = eth + pi2 * k / n_rays
        dx = cos(ang)
        dy = sin(ang)
        rdx = chc * dx + chs * dy
        rdy = -chs * dx + chc * dy
        tmin = 0.0
        tmax = INFINITY
        hit = True
        if fabs(rdx) < 1e-15:
            if fabs(bx) > hx:
                hit = False
        else:
            t1 = (-hx - bx) / rdx
            t2 = (hx - bx) / rdx
            if t1 > t2:
                tmp = t1
                t1 = t2
                t2 = tmp
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
        if fabs(rdy) < 1e-15:
            if fabs(by) > hy:
                hit = False
        else:
            t1 = (-hy - by) / rdy
            t2 = (hy - by) / rdy
            if t1 > t2:
                tmp = t1
                t1 = t2
                t2 = tmp
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
        if hit and tmin <= tmax:
            out[k] = tmin if tmin < max_range else max_range
        else:
            out[k] = max_range
    return out


# ----------------------------------------------------------------------------
# single shooting
# ----------------------------------------------------------------------------

cdef inline void _flow_c(const double* s, double u1, double u2, double l, double* k) noexcept nogil:
    k[0] = s[3] * cos(s[2])
    k[1] = s[3] * sin(s[2])
    k[2] = s[3] * tan(u1) / l
    k[3] = u2


cdef inline void _vjp_c(const double* s, double u1, double u2, double l, const double* kb,
                        double* sb, double* ub) noexcept nogil:
    # sb += Js^T kb ;  ub += Ju^T kb
    cdef double th = s[2], v = s[3]
    cdef double tu = tan(u1)
    sb[2] += -v * sin(th) * kb[0] + v * cos(th) * kb[1]
    sb[3] += cos(th) * kb[0] + sin(th) * kb[1] + tu / l * kb[2]
    ub[0] += v * (1.0 + tu * tu) / l * kb[2]
    ub[1] += kb[3]


cdef void _rk4_c(const double* s, double u1, double u2, double dt, double l, double* out,
                 double* z2, double* z3, double* z4) noexcept nogil:
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef int i
    _flow_c(s, u1, u2, l, k1)
    for i in range(4):
        z2[i] = s[i] + 0.5 * dt * k1[i]
    _flow_c(z2, u1, u2, l, k2)
    for i in range(4):
        z3[i] = s[i] + 0.5 * dt * k2[i]
    _flow_c(z3, u1, u2, l, k3)
    for i in range(4):
        z4[i] = s[i] + dt * k3[i]
    _flow_c(z4, u1, u2, l, k4)
    for i in range(4):
        out[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


def shoot_rollout(s0, U, double dt, double wheelbase):
    cdef cnp.ndarray[double, ndim=2] Uv = np.ascontiguousarray(
        np.asarray(U, dtype=np.float64).reshape(-1, 2))
    cdef int H = Uv.shape[0]
    cdef cnp.ndarray[double, ndim=2] S = np.empty((H + 1, 4))
    cdef double z2[4]
    cdef double z3[4]
    cdef double z4[4]
    cdef int i
    for i in range(4):
        S[0, i] = s0[i]
    for i in range(H):
        _rk4_c(&S[i, 0], Uv[i, 0], Uv[i, 1], dt, wheelbase, &S[i + 1, 0], z2, z3, z4)
    return S


def shoot_cost_grad(U, s0, double t0, obs, double dt, double wheelbase, double w1, double w2,
                    double p0, double y_lane, double v_des, double rho, double eps):
    cdef cnp.ndarray[double, ndim=2] Uv = np.ascontiguousarray(
        np.asarray(U, dtype=np.float64).reshape(-1, 2))
    cdef int H = Uv.shape[0]
    cdef double l = wheelbase
    cdef double cx = obs[0], cy = obs[1], r = obs[2], yoff = obs[3], vx = obs[4], vy = obs[5]
    cdef cnp.ndarray[double, ndim=2] S = np.empty((H + 1, 4))
    cdef cnp.ndarray[double, ndim=3] Z = np.empty((H, 3, 4))
    cdef cnp.ndarray[double, ndim=2] Sb = np.zeros((H + 1, 4))
    cdef cnp.ndarray[double, ndim=2] G = np.empty((H, 2))
    cdef int i, j
    cdef double J = 0.0, t, ex, ey, viol
    cdef double kb1[4]
    cdef double kb2[4]
    cdef double kb3[4]
    cdef double kb4[4]
    cdef double zb[4]
    cdef double ub[2]
    cdef double g[4]
    for j in range(4):
        S[0, j] = s0[j]
    for i in range(H):
        _rk4_c(&S[i, 0], Uv[i, 0], Uv[i, 1], dt, l, &S[i + 1, 0], &Z[i, 0, 0], &Z[i, 1, 0], &Z[i, 2, 0])
        J += dt * (w1 * Uv[i, 0] * Uv[i, 0] + w2 * Uv[i, 1] * Uv[i, 1])
        G[i, 0] = 2.0 * dt * w1 * Uv[i, 0]
        G[i, 1] = 2.0 * dt * w2 * Uv[i, 1]
    J += p0 * ((S[H, 1] - y_lane) ** 2 + S[H, 2] ** 2 + (S[H, 3] - v_des) ** 2)
    Sb[H, 1] += 2.0 * p0 * (S[H, 1] - y_lane)
    Sb[H, 2] += 2.0 * p0 * S[H, 2]
    Sb[H, 3] += 2.0 * p0 * (S[H, 3] - v_des)
    for i in range(1, H + 1):
        t = t0 + i * dt
        ex = S[i, 0] - cx - vx * t
        ey = S[i, 1] - (cy - yoff) - vy * t
        viol = eps - (ex * ex + ey * ey - r * r)
        if viol > 0.0:
            J += rho * viol * viol
            Sb[i, 0] += -4.0 * rho * viol * ex
            Sb[i, 1] += -4.0 * rho * viol * ey
    for i in range(H - 1, -1, -1):
        for j in range(4):
            g[j] = Sb[i + 1, j]
            kb1[j] = dt / 6.0 * g[j]
            kb2[j] = dt / 3.0 * g[j]
            kb3[j] = dt / 3.0 * g[j]
            kb4[j] = dt / 6.0 * g[j]
            Sb[i, j] += g[j]
        ub[0] = 0.0
        ub[1] = 0.0
        for j in range(4):
            zb[j] = 0.0
        _vjp_c(&Z[i, 2, 0], Uv[i, 0], Uv[i, 1], l, kb4, zb, ub)
        for j in range(4):
            Sb[i, j] += zb[j]
            kb3[j] += dt * zb[j]
            zb[j] = 0.0
        _vjp_c(&Z[i, 1, 0], Uv[i, 0], Uv[i, 1], l, kb3, zb, ub)
        for j in range(4):
            Sb[i, j] += zb[j]
            kb2[j] += 0.5 * dt * zb[j]
            zb[j] = 0.0
        _vjp_c(&Z[i, 0, 0], Uv[i, 0], Uv[i, 1], l, kb2, zb, ub)
        for j in range(4):
            Sb[i, j] += zb[j]
            kb1[j] += 0.5 * dt * zb[j]
            zb[j] = 0.0
        _vjp_c(&S[i, 0], Uv[i, 0], Uv[i, 1], l, kb1, zb, ub)
        for j in range(4):
            Sb[i, j] += zb[j]
        G[i, 0] += ub[0]
        G[i, 1] += ub[1]
    return J, G.reshape(-1)
