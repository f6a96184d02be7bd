"""NMPC expert and the imitation dataset it labels.

The expert solves a single-shooting NMPC over ``H`` piecewise-constant
controls. Safety enters as a quadratic penalty on ``b < eps + margin`` at
every knot; the penalty weight grows until the knots satisfy ``b >= eps``.
Bounds are handled exactly by a projected quasi-Newton method.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import core
from .dynamics import DEFAULT_BOUNDS, DEFAULT_WHEELBASE, ControlBounds, ControlPair, VehicleState
from .hocbf import ObstacleDisk
from .simworld import LidarConfig, Scenario, covering_disk, lidar_scan, rng_for, sample_scenario

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
N_LIDAR = 100
COLUMNS = (
    ["step", "t", "x", "y", "theta", "v", "u1", "u2"]
    + [f"lidar_{i}" for i in range(N_LIDAR)]
    + ["ustar1", "ustar2"]
)


class LabelingError(RuntimeError):
    pass


class DatasetAbort(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class NMPCConfig:
    horizon: int = 20
    dt: float = 0.1
    w_u: tuple[float, float] = (10.0, 1.0)
    p0: float = 10.0
    v_des: float = 10.0
    y_lane: float = 6.0
    bounds: ControlBounds = DEFAULT_BOUNDS
    obstacle: ObstacleDisk | None = None
    eps: float = 0.1
    margin: float = 0.1  # penalty acts below eps + margin
    rho: float = 1e3
    rho_max: float = 1e7
    restarts: int = 5
    max_iter: int = 200
    gtol: float = 1e-4
    wheelbase: float = DEFAULT_WHEELBASE

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not (min(self.w_u) > 0 and self.p0 > 0 and self.dt > 0):
            raise ValueError("weights and dt must be positive")
        if self.eps < 0:
            raise ValueError("safety margin must be nonnegative")

    def with_obstacle(self, obs: ObstacleDisk) -> "NMPCConfig":
        return replace(self, obstacle=obs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = {"u_min": list(self.bounds.lower), "u_max": list(self.bounds.upper)}
        d["w_u"] = list(self.w_u)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NMPCConfig":
        d = dict(d)
        if "bounds" in d and isinstance(d["bounds"], dict):
            b = d["bounds"]
            d["bounds"] = ControlBounds(ControlPair(*b["u_min"]), ControlPair(*b["u_max"]))
        if d.get("obstacle") is not None and isinstance(d["obstacle"], dict):
            d["obstacle"] = ObstacleDisk(**d["obstacle"])
        if "w_u" in d:
            d["w_u"] = tuple(d["w_u"])
        return cls(**d)


@dataclass
class NMPCResult:
    controls: np.ndarray  # (H, 2)
    cost: float  # without the safety penalty
    feasible: bool
    min_b: float
    iterations: int
    pg_norm: float
    trace: list[list[float]] = field(default_factory=list)  # penalised cost per iterate, per run


@dataclass
class LabeledSample:
    state: VehicleState
    observation: np.ndarray
    control_context: ControlPair
    label: ControlPair
    traj_id: int
    step: int
    t: float


def _no_obstacle():
    # far away and static: penalty never active
    return np.array([1e9, 1e9, 1.0, 0.0, 0.0, 0.0])


def _knot_barriers(s0, U, t0, cfg: NMPCConfig, obs):
    S = core.shoot_rollout(s0, U, cfg.dt, cfg.wheelbase)
    t = t0 + cfg.dt * np.arange(1, cfg.horizon + 1)
    cx, cy, r, yoff, vx, vy = obs
    ex = S[1:, 0] - cx - vx * t
    ey = S[1:, 1] - (cy - yoff) - vy * t
    return ex * ex + ey * ey - r * r


def _pg_norm(U, g, lo, hi):
    return float(np.max(np.abs(np.clip(U - g, lo, hi) - U)))


def _descend(s0, U0, t0, cfg: NMPCConfig, obs):
    """Penalty continuation around L-BFGS-B. Returns (U, feasible, iters, pg, trace)."""
    H = cfg.horizon
    lo = np.tile(cfg.bounds.lower, H)
    hi = np.tile(cfg.bounds.upper, H)
    w1, w2 = cfg.w_u
    U = np.clip(np.asarray(U0, dtype=float).reshape(-1), lo, hi)
    rho = cfg.rho
    iters = 0
    trace: list[list[float]] = []
    pg = np.inf
    feasible = False
    while True:
        args = (s0, t0, obs, cfg.dt, cfg.wheelbase, w1, w2, cfg.p0, cfg.y_lane, cfg.v_des, rho, cfg.eps + cfg.margin)

        def fun(x, args=args):
            return core.shoot_cost_grad(x, *args)

        run = [fun(U)[0]]

        def cb(xk, run=run, fun=fun):
            run.append(fun(xk)[0])

        res = minimize(
            fun, U, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)), callback=cb,
            options={"maxiter": cfg.max_iter, "gtol": cfg.gtol, "ftol": 1e-14},
        )
        trace.append(run)
        iters += int(res.nit)
        U = np.clip(res.x, lo, hi)
        pg = _pg_norm(U, fun(U)[1], lo, hi)
        feasible = bool(np.all(_knot_barriers(s0, U, t0, cfg, obs) >= cfg.eps))
        if feasible or rho >= cfg.rho_max:
            break
        rho *= 10.0
    return U.reshape(H, 2), feasible, iters, pg, trace


def nmpc_solve(s0: VehicleState, cfg: NMPCConfig, t0: float = 0.0, warm=None, seed=0) -> NMPCResult:
    """Finite-horizon NMPC from ``s0`` at time ``t0``.

    ``warm`` (a previous plan) is shifted by one step and tried first. The
    random restarts run when there is no warm start or the warm start ends
    infeasible. The cheapest feasible result wins.
    """
    obs = cfg.obstacle.as_array() if cfg.obstacle is not None else _no_obstacle()
    s = s0.as_array()
    if cfg.obstacle is not None:
        cx, cy = cfg.obstacle.center_at(t0)
        if (s[0] - cx) ** 2 + (s[1] - cy) ** 2 - cfg.obstacle.r ** 2 <= 0:
            raise ValueError("initial state violates the safety constraint")
    H = cfg.horizon
    starts = []
    if warm is not None:
        w = np.asarray(warm, dtype=float).reshape(-1, 2)
        starts.append(np.vstack([w[1:], w[-1:]])[:H])
    else:
        starts.append(np.zeros((H, 2)))
    best = None
    trace: list[list[float]] = []
    iters = 0
    rng = None
    k = 0
    while k < len(starts):
        U, feas, it, pg, tr = _descend(s, starts[k], t0, cfg, obs)
        iters += it
        trace += tr
        cost = core.shoot_cost_grad(U, s, t0, obs, cfg.dt, cfg.wheelbase, *cfg.w_u, cfg.p0, cfg.y_lane,
                                    cfg.v_des, 0.0, 0.0)[0]
        cand = (not feas, cost, U, pg)
        if best is None or cand[:2] < best[:2]:
            best = cand
        if k == 0 and (warm is None or not feas):
            if rng is None:
                rng = np.random.default_rng(np.random.SeedSequence(np.atleast_1d(seed).tolist()))
            for _ in range(cfg.restarts):
                starts.append(rng.uniform(cfg.bounds.lower, cfg.bounds.upper, size=(H, 2)) * 0.5)
        k += 1
    infeasible, cost, U, pg = best
    min_b = float(np.min(_knot_barriers(s, U.reshape(-1), t0, cfg, obs)))
    return NMPCResult(U, float(cost), not infeasible, min_b, iters, pg, trace)


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    n_init: int = 201
    steps: int = 100
    dt: float = 0.1
    seed: int = 0
    n_val: int = 1
    noise_frac: float = 0.0
    max_fail_frac: float = 0.05
    nmpc: NMPCConfig = field(default_factory=NMPCConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nmpc"] = self.nmpc.to_dict()
        return d


def _fmt(x) -> str:
    return repr(float(x))


def label_trajectory(sc: Scenario, gc: GenConfig):
    """Receding-horizon NMPC on one scenario. Returns the CSV rows or
    raises :class:`LabelingError`."""
    cfg = replace(gc.nmpc, dt=gc.dt).with_obstacle(sc.obstacle)
    lcfg = LidarConfig(noise_frac=gc.noise_frac)
    nrng = rng_for(gc.seed, sc.index, stream=2)
    s = sc.ego0.as_array()
    u_prev = np.zeros(2)
    warm = None
    rows = []
    for k in range(gc.steps):
        t = k * gc.dt
        vs = VehicleState.from_array(s)
        res = nmpc_solve(vs, cfg, t0=t, warm=warm, seed=(gc.seed, sc.index, k))
        if not res.feasible:
            raise LabelingError(f"scenario {sc.index}: no feasible NMPC solution at step {k}")
        u = res.controls[0]
        if not cfg.bounds.contains(u):
            raise LabelingError(f"scenario {sc.index}: label out of bounds at step {k}")
        scan = lidar_scan(vs, sc.preceding.pose_at(t), lcfg, nrng).ranges
        rows.append([str(k), _fmt(t)] + [_fmt(v) for v in s] + [_fmt(v) for v in u_prev]
                    + [_fmt(v) for v in scan] + [_fmt(v) for v in u])
        s = core.shoot_rollout(s, u[None, :], gc.dt, cfg.wheelbase)[1]
        cx, cy = sc.obstacle.center_at(t + gc.dt)
        if (s[0] - cx) ** 2 + (s[1] - cy) ** 2 - sc.obstacle.r ** 2 <= 0:
            raise LabelingError(f"scenario {sc.index}: collision after step {k}")
        u_prev = u
        warm = res.controls
    return rows


def _label_index(args):
    i, gc = args
    sc = sample_scenario(gc.seed, i)
    try:
        return i, sc, label_trajectory(sc, gc), None
    except LabelingError as exc:
        return i, sc, None, str(exc)


def gen_dataset(out_dir, gc: GenConfig = GenConfig(), workers: int = 1, progress=None) -> dict:
    """Label ``n_init`` scenarios and write the dataset directory.

    Scenario ``i`` is drawn from ``(seed, i)``. A scenario whose labeling
    fails is logged and replaced by the next index. The last ``n_val``
    trajectories form the validation split.
    """
    os.makedirs(out_dir, exist_ok=True)
    allowed = int(np.floor(gc.max_fail_frac / (1.0 - gc.max_fail_frac) * gc.n_init))
    done: list[tuple[int, Scenario, list]] = []
    failures: list[dict] = []
    nxt = 0
    pool = None
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        pool = ProcessPoolExecutor(workers)
    try:
        while len(done) < gc.n_init:
            need = gc.n_init - len(done)
            idx = list(range(nxt, nxt + need))
            nxt += need
            jobs = [(i, gc) for i in idx]
            results = pool.map(_label_index, jobs) if pool else map(_label_index, jobs)
            for i, sc, rows, err in results:
                if err is None:
                    done.append((i, sc, rows))
                    if progress:
                        progress(len(done), gc.n_init)
                else:
                    log.warning("labeling failure: %s", err)
                    failures.append({"index": i, "reason": err})
                    if len(failures) > allowed:
                        report = {"failures": failures, "labeled": len(done)}
                        raise DatasetAbort(
                            f"labeling failure rate above {gc.max_fail_frac:.0%} "
                            f"({len(failures)} failures)", report)
    finally:
        if pool:
            pool.shutdown()
    done.sort(key=lambda r: r[0])
    done = done[: gc.n_init]
    entries = []
    for j, (i, sc, rows) in enumerate(done):
        name = f"traj_{j:03d}.csv"
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            w.writerows(rows)
        split = "validation" if j >= gc.n_init - gc.n_val else "train"
        entries.append({"file": name, "split": split, "scenario": sc.to_dict()})
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": gc.to_dict(),
        "seed": gc.seed,
        "counts": {
            "trajectories": len(entries),
            "train": sum(e["split"] == "train" for e in entries),
            "validation": sum(e["split"] == "validation" for e in entries),
            "samples": len(entries) * gc.steps,
            "attempts": len(entries) + len(failures),
            "failures": len(failures),
        },
        "failures": failures,
        "columns": COLUMNS,
        "trajectories": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


@dataclass
class TrajectoryData:
    name: str
    split: str
    scenario: Scenario
    t: np.ndarray
    states: np.ndarray  # (N, 4)
    u: np.ndarray  # (N, 2) control context
    lidar: np.ndarray  # (N, 100)
    ustar: np.ndarray  # (N, 2)

    def __len__(self):
        return self.t.size

    def samples(self, traj_id: int = 0):
        for k in range(len(self)):
            yield LabeledSample(
                VehicleState.from_array(self.states[k]), self.lidar[k], ControlPair.from_array(self.u[k]),
                ControlPair.from_array(self.ustar[k]), traj_id, k, float(self.t[k]),
            )


@dataclass
class Dataset:
    manifest: dict
    trajectories: list[TrajectoryData]

    @property
    def train(self) -> list[TrajectoryData]:
        return [t for t in self.trajectories if t.split == "train"]

    @property
    def validation(self) -> list[TrajectoryData]:
        return [t for t in self.trajectories if t.split == "validation"]

    @property
    def dt(self) -> float:
        return float(self.manifest["config"]["dt"])


def load_trajectory_csv(path) -> dict[str, np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {
        "step": arr[:, 0].astype(int),
        "t": arr[:, 1],
        "states": arr[:, 2:6],
        "u": arr[:, 6:8],
        "lidar": arr[:, 8:8 + N_LIDAR],
        "ustar": arr[:, 8 + N_LIDAR:10 + N_LIDAR],
    }


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "manifest.json")) as fh:
        man = json.load(fh)
    if man.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {man.get('format_version')!r}")
    trajs = []
    for e in man["trajectories"]:
        d = load_trajectory_csv(os.path.join(path, e["file"]))
        trajs.append(TrajectoryData(e["file"], e["split"], Scenario.from_dict(e["scenario"]),
                                    d["t"], d["states"], d["u"], d["lidar"], d["ustar"]))
    return Dataset(man, trajs)


__all__ = [
    "NMPCConfig", "NMPCResult", "LabeledSample", "GenConfig", "nmpc_solve", "label_trajectory",
    "gen_dataset", "load_dataset", "Dataset", "TrajectoryData", "covering_disk",
]
