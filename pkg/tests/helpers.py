"""Independent reference computations shared by the tests."""

import math

import numpy as np


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def psi2_closed_form(x, y, th, v, u1, u2, x0, y0, r, l=2.0):
    """Unit-gain psi_2 for a static disk, written out by hand.

    b = dx^2 + dy^2 - r^2, b' = 2 v (dx cos + dy sin),
    b'' = 2 v^2 + 2 (dy cos - dx sin) v^2 tan(u1) / l + 2 (dx cos + dy sin) u2
    psi_2 = b'' + 2 b' + b
    """
    dx, dy = x - x0, y - y0
    c, s = math.cos(th), math.sin(th)
    b = dx * dx + dy * dy - r * r
    bd = 2 * v * (dx * c + dy * s)
    bdd = 2 * v * v + 2 * (dy * c - dx * s) * v * v * math.tan(u1) / l + 2 * (dx * c + dy * s) * u2
    return bdd + 2 * bd + b


def augmented_rk4(z, t, udot, h, l=2.0, obs_fn=None):
    """One RK4 step of (x, y, theta, v, u1, u2) with constant control rate."""
    udot = np.asarray(udot, dtype=float)

    def f(zz):
        x, y, th, v, u1, u2 = zz
        return np.array([v * math.cos(th), v * math.sin(th), v / l * math.tan(u1), u2, udot[0], udot[1]])

    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), t + h


def random_qp(rng, q=2, m=None, margin=1e-3):
    """Feasible random projection problem whose active set is well separated.

    Returns ``(y, A, c)``. Problems with a row close to switching (active
    with a tiny multiplier, or inactive with a tiny slack) are redrawn.
    """
    from safeode import core

    while True:
        mm = m if m is not None else int(rng.integers(1, 6))
        A = rng.normal(size=(mm, q))
        x0 = rng.normal(size=q)
        c = -A @ x0 + rng.uniform(0.1, 1.0, size=mm)
        y = x0 + rng.normal(scale=2.0, size=q)
        x, lam, working, status, _ = core.qp_solve(y, A, c, 1e-10, 100)
        if status != core.QP_OK:
            continue
        slack = A @ x + c
        act = lam > 1e-10
        if np.any(act & (lam < margin)) or np.any(~act & (slack < margin)):
            continue
        if act.sum() and np.linalg.matrix_rank(A[act]) < act.sum():
            continue
        return y, A, c


def end_to_end_grad_check(method="rk4", seed=2, h=0.05):
    """Max relative error of taped gradients against central differences.

    A reduced network drives the synthesized field for one fixed step of
    length ``h``. The start states are chosen so the safety row of the QP
    is active, which exercises the constraint path as well. Returns
    ``(worst_rel_err, n_active)``.
    """
    from safeode import core
    from safeode import neuralnet as nn
    from safeode.hocbf import ObstacleDisk
    from safeode.odeint import SolverConfig, SynthesizedField, backprop_through, integrate_taped

    rng = np.random.default_rng(seed)
    spec = nn.MLPSpec((104, 6, 4, 2))
    P = nn.MLPParams.init(spec, rng)
    P.biases[-1][:] = [0.0, 1.5]  # push forward so the barrier row binds
    norm = nn.Normalization()
    B = 40
    obs = np.tile(ObstacleDisk(0, 0, 5, 0, 6, 0).as_array(), (B, 1))
    lid = rng.uniform(10, 50, (B, 100))
    Z0 = np.column_stack([rng.uniform(-20, -15.5, B), rng.uniform(-1, 1, B), rng.uniform(-0.1, 0.1, B),
                          rng.uniform(8, 11, B), rng.uniform(-0.1, 0.1, B), rng.uniform(-1, 1, B)])
    gains, thp = (1.3, 0.8, 1.1), 0.9
    fld = SynthesizedField(spec, P, norm, gains, thp, obs, lid)
    fld.eval(0.0, Z0)
    _, _, PSI, _ = core.bicycle_row_batch(Z0, 0.0, obs, 2.0, gains[0], gains[1], thp * gains[2])
    sel = np.flatnonzero(fld.last_active & (PSI[:, 2] > 0))[:3]
    inactive = np.flatnonzero(~fld.last_active)[:2]
    sel = np.concatenate([sel, inactive])
    Z0, obs, lid = Z0[sel], obs[sel], lid[sel]
    W = rng.normal(size=(len(sel), 6))
    target = rng.normal(size=(len(sel), 2))
    cfg = SolverConfig(method, h=h)

    def loss(P, gains, thp, Z0):
        f = SynthesizedField(spec, P, norm, gains, thp, obs, lid)
        tr = integrate_taped(f, Z0, 0.0, h, cfg)
        zT = tr.states[-1]
        L = float(np.sum(W * zT) + np.sum((zT[:, 4:6] - target) ** 2))
        dL = W.copy()
        dL[:, 4:6] += 2 * (zT[:, 4:6] - target)
        return L, tr, dL

    L, tr, dL = loss(P, gains, thp, Z0)
    g, dz0 = backprop_through(tr, {len(tr.times) - 1: dL})
    d1, d2, d3, dth = g.gains_and_penalty(gains[2], thp)
    an = np.concatenate([g.mlp.to_flat(), [d1, d2, d3, dth], dz0.ravel()])

    e = 1e-6
    flat = P.to_flat()
    fd = []
    for i in range(flat.size):
        d = np.zeros_like(flat)
        d[i] = e
        fd.append((loss(nn.MLPParams.from_flat(spec, flat + d), gains, thp, Z0)[0]
                   - loss(nn.MLPParams.from_flat(spec, flat - d), gains, thp, Z0)[0]) / (2 * e))
    for i in range(3):
        gp, gm = list(gains), list(gains)
        gp[i] += e
        gm[i] -= e
        fd.append((loss(P, gp, thp, Z0)[0] - loss(P, gm, thp, Z0)[0]) / (2 * e))
    fd.append((loss(P, gains, thp + e, Z0)[0] - loss(P, gains, thp - e, Z0)[0]) / (2 * e))
    for i in range(Z0.size):
        d = np.zeros(Z0.size)
        d[i] = e
        fd.append((loss(P, gains, thp, Z0 + d.reshape(Z0.shape))[0]
                   - loss(P, gains, thp, Z0 - d.reshape(Z0.shape))[0]) / (2 * e))
    fd = np.array(fd)
    err = float(np.max(np.abs(an - fd)) / max(float(np.max(np.abs(fd))), 1e-8))
    n_active = int(np.sum(PSI[:, 2][sel] > 0) - len(inactive))
    return err, n_active
