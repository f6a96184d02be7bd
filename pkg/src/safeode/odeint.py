"""ODE solvers and integration of the synthesized (state, control) model.

Three methods share one interface:

* ``dopri5``      adaptive Dormand-Prince 5(4), used for evaluation,
* ``fixed_adams`` 4th-order Adams-Bashforth with an RK4 warm-up,
* ``rk4``         classical fixed-step Runge-Kutta.

The fixed-step methods can also run on a :class:`SolverTape`, which records
every solver stage as a linear combination of earlier nodes plus the vector
field evaluations. Reverse mode over that record gives exact gradients of
the discrete solution (discretize-then-optimize).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import core
from . import neuralnet as nn
from .dynamics import DEFAULT_BOUNDS, DEFAULT_WHEELBASE, AugmentedState, ControlBounds

METHODS = ("dopri5", "fixed_adams", "rk4")


class IntegrationError(RuntimeError):
    pass


class MaxStepsError(IntegrationError):
    pass


class StepUnderflowError(IntegrationError):
    pass


class NonFiniteDerivativeError(IntegrationError, ArithmeticError):
    pass


class TapeUnavailableError(RuntimeError):
    """Gradients were requested for an untaped (adaptive) trajectory."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-6
    atol: float = 1e-8
    h: float = 0.01
    max_steps: int = 100_000

    def __post_init__(self):
        m = self.method.replace("-", "_")
        if m not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "method", m)
        if not (self.rtol > 0 and self.atol > 0 and self.h > 0):
            raise ValueError("rtol, atol and h must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    @property
    def fixed(self) -> bool:
        return self.method != "dopri5"


@dataclass
class Diagnostics:
    accepted: int = 0
    rejected: int = 0
    nfev: int = 0
    err_norms: list[float] = field(default_factory=list)  # per accepted dopri5 step
    qp_time_s: list[float] = field(default_factory=list)  # per field evaluation
    nn_time_s: list[float] = field(default_factory=list)
    failure: str | None = None
    failure_time: float | None = None


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (N, n) or (N, B, n) for batched runs
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    tape: "SolverTape | None" = None
    nodes: list[int] | None = None  # tape node of each stored time
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def augmented(self, i: int) -> AugmentedState:
        return AugmentedState.from_array(self.states[i], float(self.times[i]))

    @property
    def failed(self) -> bool:
        return self.diagnostics.failure is not None


# --------------------------------------------------------------------------
# plain integrators
# --------------------------------------------------------------------------

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_AB4 = np.array([55.0, -59.0, 37.0, -9.0]) / 24.0


def _checked(f, t, z, diag):
    d = np.asarray(f(t, z), dtype=float)
    diag.nfev += 1
    if not np.all(np.isfinite(d)):
        raise NonFiniteDerivativeError(f"non-finite derivative at t={t}")
    return d


def _rk4(f, t, z, h, diag, k1=None):
    if k1 is None:
        k1 = _checked(f, t, z, diag)
    k2 = _checked(f, t + 0.5 * h, z + 0.5 * h * k1, diag)
    k3 = _checked(f, t + 0.5 * h, z + 0.5 * h * k2, diag)
    k4 = _checked(f, t + h, z + h * k3, diag)
    return z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _n_steps(t0, t1, h):
    return max(1, int(math.ceil((t1 - t0) / h - 1e-9)))


def _fixed(f, z0, t0, t1, cfg: SolverConfig, diag):
    n = _n_steps(t0, t1, cfg.h)
    if n > cfg.max_steps:
        raise MaxStepsError(f"{n} steps needed, max_steps={cfg.max_steps}")
    h = (t1 - t0) / n
    ts = [t0]
    zs = [z0]
    hist: list[np.ndarray] = []  # f at past grid points, newest last
    z = z0
    for i in range(n):
        t = t0 + i * h
        fz = _checked(f, t, z, diag)
        hist.append(fz)
        if cfg.method == "fixed_adams" and len(hist) >= 4:
            z = z + h * (_AB4[0] * hist[-1] + _AB4[1] * hist[-2] + _AB4[2] * hist[-3] + _AB4[3] * hist[-4])
            hist.pop(0)
        else:
            z = _rk4(f, t, z, h, diag, k1=fz)
        diag.accepted += 1
        ts.append(t0 + (i + 1) * h)
        zs.append(z)
    return np.array(ts), np.array(zs)


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _initial_step(f, t0, z0, f0, rtol, atol, diag):
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    sc = atol + rtol * np.abs(z0)
    d0 = _rms(z0 / sc)
    d1 = _rms(f0 / sc)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = _checked(f, t0 + h0, z0 + h0 * f0, diag)
    d2 = _rms((f1 - f0) / sc) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1)


def _dopri5(f, z0, t0, t1, cfg: SolverConfig, diag):
    ts = [t0]
    zs = [z0]
    t, z = t0, z0
    k1 = _checked(f, t, z, diag)
    h = min(_initial_step(f, t, z, k1, cfg.rtol, cfg.atol, diag), t1 - t0)
    steps = 0
    while t < t1:
        if steps >= cfg.max_steps:
            raise MaxStepsError(f"max_steps={cfg.max_steps} reached at t={t}")
        if h < 1e-12 * max(1.0, abs(t)):
            raise StepUnderflowError(f"step size underflow at t={t}")
        last = t + h >= t1 - 1e-12 * max(1.0, abs(t1))
        if last:
            h = t1 - t
        K = [k1]
        for s in range(1, 7):
            zs_ = z + h * sum(a * k for a, k in zip(_A[s], K) if a != 0.0)
            K.append(_checked(f, t + _C[s] * h, zs_, diag))
        z_new = z + h * sum(b * k for b, k in zip(_B5, K) if b != 0.0)
        err = h * sum(e * k for e, k in zip(_E, K))
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z_new))
        en = _rms(err / sc)
        steps += 1
        if en <= 1.0:
            t = t1 if last else t + h
            z = z_new
            k1 = K[6]
            ts.append(t)
            zs.append(z)
            diag.accepted += 1
            diag.err_norms.append(en)
            fac = 10.0 if en == 0 else min(10.0, max(0.2, 0.9 * en ** -0.2))
        else:
            diag.rejected += 1
            fac = max(0.2, 0.9 * en ** -0.2)
        h = h * fac
    return np.array(ts), np.array(zs)


def integrate(f: Callable, z0, t0: float, t1: float, cfg: SolverConfig | None = None) -> Trajectory:
    """Integrate ``z' = f(t, z)`` from ``t0`` to ``t1``."""
    cfg = cfg or SolverConfig()
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    z0 = np.array(z0, dtype=float)
    diag = Diagnostics()
    run = _dopri5 if cfg.method == "dopri5" else _fixed
    ts, zs = run(f, z0, float(t0), float(t1), cfg, diag)
    return Trajectory(ts, zs, diag)


# --------------------------------------------------------------------------
# taped fixed-step integration
# --------------------------------------------------------------------------

class SolverTape:
    """Record of solver stages for reverse mode.

    Nodes are arrays. A node is a leaf, a linear combination of earlier
    nodes, or a vector field evaluation at an earlier node.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[tuple] = []  # (kind, out, payload)

    def leaf(self, z) -> int:
        self.values.append(np.array(z, dtype=float))
        self.ops.append(("leaf", len(self.values) - 1, None))
        return len(self.values) - 1

    def lin(self, terms) -> int:
        """Node ``sum(coef * node)`` for ``terms = [(coef, node), ...]``."""
        out = None
        for c, j in terms:
            out = c * self.values[j] if out is None else out + c * self.values[j]
        self.values.append(out)
        self.ops.append(("lin", len(self.values) - 1, tuple(terms)))
        return len(self.values) - 1

    def call(self, fld, t: float, j: int) -> int:
        d, ctx = fld.eval(t, self.values[j], tape=True)
        if not np.all(np.isfinite(d)):
            raise NonFiniteDerivativeError(f"non-finite derivative at t={t}")
        self.values.append(d)
        self.ops.append(("call", len(self.values) - 1, (fld, j, ctx)))
        return len(self.values) - 1

    def backward(self, seeds: dict[int, np.ndarray], grads) -> dict[int, np.ndarray]:
        """Propagate ``seeds`` (node -> adjoint) back to the leaves.

        Parameter gradients are accumulated into ``grads`` by each field's
        ``vjp``. Returns the adjoints of the leaf nodes.
        """
        adj: dict[int, np.ndarray] = {}
        for j, g in seeds.items():
            adj[j] = adj.get(j, 0.0) + np.asarray(g, dtype=float)
        leaves = {}
        for kind, out, payload in reversed(self.ops):
            g = adj.pop(out, None)
            if g is None:
                continue
            if kind == "leaf":
                leaves[out] = g
            elif kind == "lin":
                for c, j in payload:
                    adj[j] = adj[j] + c * g if j in adj else c * g
            else:
                fld, j, ctx = payload
                gz = fld.vjp(ctx, g, grads)
                adj[j] = adj[j] + gz if j in adj else gz
        return leaves


def taped_steps(tape: SolverTape, fld, node: int, t0: float, t1: float, cfg: SolverConfig):
    """Fixed-step integration on ``tape`` starting from ``node``.

    Returns ``(times, nodes)`` for every grid point including the start.
    Adams-Bashforth history starts fresh here, so a new call after a jump
    in the field (new observation) warms up with RK4 again.
    """
    if not cfg.fixed:
        raise TapeUnavailableError("only fixed-step methods can be taped")
    n = _n_steps(t0, t1, cfg.h)
    h = (t1 - t0) / n
    times = [t0]
    nodes = [node]
    hist: list[int] = []
    for i in range(n):
        t = t0 + i * h
        k1 = tape.call(fld, t, node)
        hist.append(k1)
        if cfg.method == "fixed_adams" and len(hist) >= 4:
            node = tape.lin(
                [(1.0, node)] + [(h * _AB4[j], hist[-1 - j]) for j in range(4)]
            )
            hist.pop(0)
        else:
            z2 = tape.lin([(1.0, node), (0.5 * h, k1)])
            k2 = tape.call(fld, t + 0.5 * h, z2)
            z3 = tape.lin([(1.0, node), (0.5 * h, k2)])
            k3 = tape.call(fld, t + 0.5 * h, z3)
            z4 = tape.lin([(1.0, node), (h, k3)])
            k4 = tape.call(fld, t + h, z4)
            node = tape.lin(
                [(1.0, node), (h / 6.0, k1), (h / 3.0, k2), (h / 3.0, k3), (h / 6.0, k4)]
            )
        times.append(t0 + (i + 1) * h)
        nodes.append(node)
    return times, nodes


def integrate_taped(fld, z0, t0: float, t1: float, cfg: SolverConfig) -> Trajectory:
    """Fixed-step integration of a field object, keeping the tape."""
    tape = SolverTape()
    start = tape.leaf(z0)
    times, nodes = taped_steps(tape, fld, start, t0, t1, cfg)
    states = np.array([tape.values[j] for j in nodes])
    diag = Diagnostics(accepted=len(nodes) - 1)
    return Trajectory(np.array(times), states, diag, tape=tape, nodes=nodes)


def backprop_through(traj: Trajectory, loss_grads: dict[int, np.ndarray], grads=None):
    """Reverse mode through a taped trajectory.

    ``loss_grads`` maps a time index of ``traj`` to dL/dz at that time.
    Returns ``(grads, dz0)`` where ``grads`` holds the field's parameter
    gradients (created by ``fld.zero_grads()`` when not given).
    """
    if traj.tape is None or traj.nodes is None:
        raise TapeUnavailableError("trajectory was integrated without a tape")
    tape = traj.tape
    if grads is None:
        flds = [p[0] for k, _, p in tape.ops if k == "call"]
        grads = flds[0].zero_grads() if flds else None
    seeds = {traj.nodes[i]: g for i, g in loss_grads.items()}
    leaves = tape.backward(seeds, grads)
    dz0 = leaves.get(traj.nodes[0], np.zeros_like(tape.values[traj.nodes[0]]))
    return grads, dz0


# --------------------------------------------------------------------------
# the synthesized model: bicycle + network + projection QP
# --------------------------------------------------------------------------

@dataclass
class FieldGrads:
    """Parameter gradients of a :class:`SynthesizedField`."""

    mlp: nn.MLPParams
    p1: float = 0.0
    p2: float = 0.0
    k: float = 0.0  # k = theta_p * p3

    def gains_and_penalty(self, p3: float, theta_p: float):
        """Chain ``k`` into ``(dp1, dp2, dp3, dtheta_p)``."""
        return self.p1, self.p2, self.k * theta_p, self.k * p3


_BOUND_A = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


class SynthesizedField:
    """Batched vector field ``(x, u)' = (h(x, u), QP(pi(x, u, I)))``.

    ``Z`` rows are ``(x, y, theta, v, u1, u2)``. Each row has its own
    obstacle disk (``obs``, shape (B, 6)) and its own LiDAR scan held
    constant until replaced. Rows whose QP becomes infeasible are marked
    dead: their control rate is set to zero, they are excluded from
    gradients, and ``dead_time`` records when it happened.

    With ``use_qp=False`` the network output drives ``u`` directly and the
    plant sees ``u`` saturated to the bounds.
    """

    def __init__(
        self,
        spec: nn.MLPSpec,
        params: nn.MLPParams,
        norm: nn.Normalization,
        gains,
        theta_p: float,
        obs,
        lidar,
        bounds: ControlBounds = DEFAULT_BOUNDS,
        wheelbase: float = DEFAULT_WHEELBASE,
        use_qp: bool = True,
        timing: bool = False,
    ):
        self.spec = spec
        self.params = params
        self.norm = norm
        self.p1, self.p2, self.p3 = (float(g) for g in gains)
        self.theta_p = float(theta_p)
        self.obs = np.atleast_2d(np.asarray(obs, dtype=float))
        self.lidar = np.atleast_2d(np.asarray(lidar, dtype=float))
        self.B = self.obs.shape[0]
        self.bounds = bounds
        self.lo, self.hi = bounds.lower, bounds.upper
        self.wheelbase = float(wheelbase)
        self.use_qp = use_qp
        self.timing = timing
        self.out_scale = np.asarray(norm.out_scale, dtype=float)
        self.in_scale = norm.input_scale()
        self.alive = np.ones(self.B, dtype=bool)
        self.dead_time = np.full(self.B, np.nan)
        self.qp_time_s: list[float] = []
        self.nn_time_s: list[float] = []
        self.last_active = np.zeros(self.B, dtype=bool)
        self.degenerate = 0

    @property
    def k(self) -> float:
        return self.theta_p * self.p3

    def set_lidar(self, lidar):
        self.lidar = np.atleast_2d(np.asarray(lidar, dtype=float))

    def zero_grads(self) -> FieldGrads:
        return FieldGrads(nn.MLPParams.zeros(self.spec))

    def _clip(self, U):
        return np.clip(U, self.lo, self.hi)

    def eval(self, t: float, Z, tape: bool = False):
        Z = np.asarray(Z, dtype=float)
        squeeze = Z.ndim == 1
        Z2 = Z[None, :] if squeeze else Z
        th, v, U = Z2[:, 2], Z2[:, 3], Z2[:, 4:6]

        t0 = time.perf_counter()
        X = self.norm.build_input(self.lidar, th, v, U)
        out = nn.forward(X, self.params, self.spec, tape=tape)
        Yn, mtape = out if tape else (out, None)
        Y = Yn * self.out_scale
        t1 = time.perf_counter()

        qp = None
        if self.use_qp:
            Ar, Cr, PSI, JAC = core.bicycle_row_batch(
                Z2, t, self.obs, self.wheelbase, self.p1, self.p2, self.k
            )
            B = Z2.shape[0]
            A = np.empty((B, 5, 2))
            A[:, 0] = Ar
            A[:, 1:] = _BOUND_A
            C = np.empty((B, 5))
            C[:, 0] = Cr
            C[:, 1:3] = U - self.lo
            C[:, 3:5] = self.hi - U
            Xq, LAM, W, status, _ = core.qp_solve_batch(Y, A, C)
            bad = status != core.QP_OK
            if np.any(bad & self.alive):
                newly = bad & self.alive
                self.alive[newly] = False
                self.dead_time[newly] = t
            Udot = np.where(self.alive[:, None], Xq, 0.0)
            self.last_active = W[:, 0].copy()
            qp = (A, Xq, LAM, JAC, PSI, status)
            Ueff = U
        else:
            Udot = Y
            Ueff = self._clip(U)
        t2 = time.perf_counter()
        if self.timing:
            self.nn_time_s.append(t1 - t0)
            self.qp_time_s.append(t2 - t1)

        c, s = np.cos(th), np.sin(th)
        tu = np.tan(Ueff[:, 0])
        dZ = np.empty_like(Z2)
        dZ[:, 0] = v * c
        dZ[:, 1] = v * s
        dZ[:, 2] = v * tu / self.wheelbase
        dZ[:, 3] = Ueff[:, 1]
        dZ[:, 4:6] = Udot
        if squeeze:
            dZ = dZ[0]
        ctx = (Z2, mtape, qp, self.alive.copy(), squeeze) if tape else None
        return dZ, ctx

    def __call__(self, t, Z):
        return self.eval(t, Z)[0]

    def vjp(self, ctx, G, grads: FieldGrads):
        Z, mtape, qp, alive, squeeze = ctx
        G = np.asarray(G, dtype=float)
        G = G[None, :] if squeeze else G
        G = np.where(alive[:, None], G, 0.0)
        th, v, U = Z[:, 2], Z[:, 3], Z[:, 4:6]
        gZ = np.zeros_like(Z)

        # bicycle flow
        c, s = np.cos(th), np.sin(th)
        l = self.wheelbase
        if self.use_qp:
            u1, inside = U[:, 0], np.ones((Z.shape[0], 2))
        else:
            u1 = self._clip(U)[:, 0]
            inside = ((U > self.lo) & (U < self.hi)).astype(float)
        tu = np.tan(u1)
        gZ[:, 2] = -G[:, 0] * v * s + G[:, 1] * v * c
        gZ[:, 3] = G[:, 0] * c + G[:, 1] * s + G[:, 2] * tu / l
        gZ[:, 4] = G[:, 2] * v * (1.0 + tu * tu) / l * inside[:, 0]
        gZ[:, 5] = G[:, 3] * inside[:, 1]

        gud = G[:, 4:6]
        if qp is not None:
            A, Xq, LAM, JAC, PSI, status = qp
            ok = alive & (status == core.QP_OK)
            gud = np.where(ok[:, None], gud, 0.0)
            DY, DA, DC, bst = core.qp_backward_batch(A, Xq, LAM, gud)
            deg = bst != core.QP_OK
            if np.any(deg & ok):
                self.degenerate += int(np.sum(deg & ok))
            use = ok & ~deg
            DY = np.where(use[:, None], DY, 0.0)
            DA = np.where(use[:, None, None], DA, 0.0)
            DC = np.where(use[:, None], DC, 0.0)
            # bound rows: c = u - lo and hi - u
            gZ[:, 4:6] += DC[:, 1:3] - DC[:, 3:5]
            # safety row entries (a1, a2, c) through their Jacobian
            w = np.stack([DA[:, 0, 0], DA[:, 0, 1], DC[:, 0]], axis=1)
            J = np.einsum("br,brk->bk", w, JAC)
            gZ += J[:, :6]
            grads.p1 += float(J[:, 6].sum())
            grads.p2 += float(J[:, 7].sum())
            grads.k += float((DC[:, 0] * PSI[:, 2]).sum())
            gY = DY
        else:
            gY = gud

        if np.any(gY):
            gp, gX = nn.backward(mtape, gY * self.out_scale)
            for acc, g in zip(grads.mlp.arrays(), gp.arrays()):
                acc += g
            gX = gX * self.in_scale
            gZ[:, 2] += gX[:, 100]
            gZ[:, 3] += gX[:, 101]
            gZ[:, 4:6] += gX[:, 102:104]
        return gZ[0] if squeeze else gZ


# --------------------------------------------------------------------------
# closed-loop integration of one episode
# --------------------------------------------------------------------------

def field_from_checkpoint(ckpt, obs, lidar, bounds=DEFAULT_BOUNDS, use_qp=True, timing=False):
    """Build a :class:`SynthesizedField` from any object with the checkpoint
    attributes ``spec, params, norm, gains, theta_p, wheelbase``."""
    return SynthesizedField(
        ckpt.spec,
        ckpt.params,
        ckpt.norm,
        ckpt.gains,
        ckpt.theta_p,
        obs,
        lidar,
        bounds=bounds,
        wheelbase=ckpt.wheelbase,
        use_qp=use_qp,
        timing=timing,
    )


def integrate_synthesized(
    ckpt,
    s0,
    u0,
    obs_source: Callable,
    t_span: tuple[float, float],
    cfg: SolverConfig | None = None,
    obstacle=None,
    bounds: ControlBounds = DEFAULT_BOUNDS,
    control_dt: float = 0.1,
    use_qp: bool = True,
):
    """Closed-loop integration of the synthesized model for one episode.

    ``obs_source(t, z)`` returns the 100 LiDAR ranges; it is called at every
    control-update instant (multiples of ``control_dt``) and the scan is
    held in between. The solver restarts at each update. On QP
    infeasibility the episode stops and the partial trajectory is
    returned with ``diagnostics.failure`` set.

    ``extras`` holds, per stored time, ``b, psi1, psi2`` (with the
    checkpoint gains), ``qp_active`` (safety row active) and ``qp_time_s``.
    """
    cfg = cfg or SolverConfig()
    if u0 is None:
        u0 = np.zeros(2)
    s = s0.as_array() if hasattr(s0, "as_array") else np.asarray(s0, dtype=float)
    u = u0.as_array() if hasattr(u0, "as_array") else np.asarray(u0, dtype=float)
    z = np.concatenate([s, u])
    ob = obstacle.as_array() if hasattr(obstacle, "as_array") else np.asarray(obstacle, dtype=float)
    t0, t1 = float(t_span[0]), float(t_span[1])
    n_int = max(1, int(round((t1 - t0) / control_dt)))

    scans = [np.asarray(obs_source(t0, z), dtype=float)]
    fld = field_from_checkpoint(ckpt, ob[None, :], scans[0], bounds, use_qp, timing=True)
    diag = Diagnostics()
    times = [t0]
    states = [z.copy()]
    for i in range(n_int):
        ta = t0 + i * control_dt
        tb = t1 if i == n_int - 1 else t0 + (i + 1) * control_dt
        if i > 0:
            scans.append(np.asarray(obs_source(ta, z), dtype=float))
            fld.set_lidar(scans[-1])
        try:
            tr = integrate(fld, z, ta, tb, cfg)
        except NonFiniteDerivativeError as exc:
            diag.failure, diag.failure_time = str(exc), ta
            break
        diag.accepted += tr.diagnostics.accepted
        diag.rejected += tr.diagnostics.rejected
        diag.nfev += tr.diagnostics.nfev
        diag.err_norms += tr.diagnostics.err_norms
        if not fld.alive[0]:
            diag.failure = "qp_infeasible"
            diag.failure_time = float(fld.dead_time[0])
            # keep states up to the failure instant only
            keep = tr.times <= diag.failure_time
            times += list(tr.times[1:][keep[1:]])
            states += list(tr.states[1:][keep[1:]])
            break
        z = tr.states[-1]
        times += list(tr.times[1:])
        states += list(tr.states[1:])
    diag.qp_time_s = fld.qp_time_s
    diag.nn_time_s = fld.nn_time_s
    traj = Trajectory(np.array(times), np.array(states), diag)
    traj.extras = annotate(traj, ckpt, ob, bounds, use_qp, scans, control_dt, t0)
    return traj


def annotate(traj: Trajectory, ckpt, ob, bounds, use_qp, scans, control_dt, t0) -> dict[str, np.ndarray]:
    """Barrier values and QP status at each stored time of a trajectory.

    ``scans[j]`` is the LiDAR scan held on control interval ``j``.
    """
    Z = traj.states
    p1, p2 = float(ckpt.gains[0]), float(ckpt.gains[1])
    bv = core.barrier_values(Z, traj.times, ob, ckpt.wheelbase, p1, p2)
    n = len(traj.times)
    active = np.zeros(n, dtype=bool)
    qpt = np.zeros(n)
    if use_qp:
        fld = field_from_checkpoint(ckpt, ob[None, :], scans[0], bounds, True, timing=True)
        for i, (t, z) in enumerate(zip(traj.times, Z)):
            j = min(int(math.floor((t - t0) / control_dt + 1e-9)), len(scans) - 1)
            fld.set_lidar(scans[j])
            fld.alive[:] = True
            fld.eval(float(t), z)
            active[i] = bool(fld.last_active[0])
            qpt[i] = fld.qp_time_s[-1]
    return {"b": bv[:, 0], "psi1": bv[:, 1], "psi2": bv[:, 2], "qp_active": active, "qp_time_s": qpt}


TRAJ_COLUMNS = ["t", "x", "y", "theta", "v", "u1", "u2", "b", "psi1", "psi2", "qp_active", "qp_time_s"]


def write_trajectory_csv(traj: Trajectory, path) -> None:
    ex = traj.extras
    n = len(traj.times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for i in range(n):
            row = [repr(float(traj.times[i]))] + [repr(float(x)) for x in traj.states[i][:6]]
            for key in ("b", "psi1", "psi2"):
                row.append(repr(float(ex[key][i])) if key in ex else "")
            row.append(int(ex["qp_active"][i]) if "qp_active" in ex else 0)
            row.append(repr(float(ex["qp_time_s"][i])) if "qp_time_s" in ex else "")
            w.writerow(row)


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for key in TRAJ_COLUMNS:
        vals = [r[key] for r in rows]
        out[key] = np.array([float(v) if v != "" else np.nan for v in vals])
    return out
