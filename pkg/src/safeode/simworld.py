"""Highway overtaking world: scenarios, LiDAR, closed-loop rollouts, metrics.

The ego vehicle starts behind a slower preceding vehicle that drives at
constant speed. The preceding footprint is covered by a disk that moves with
it; keeping the ego center outside that disk rules out a collision.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .dynamics import DEFAULT_BOUNDS, DEFAULT_WHEELBASE, VehicleState
from .hocbf import ObstacleDisk
from .odeint import SolverConfig, Trajectory, integrate_synthesized

VEH_LENGTH = 4.5
VEH_WIDTH = 2.0
N_RAYS = 100
MAX_RANGE = 50.0
DISK_R = 5.0
DISK_Y_OFF = 0.0
PRECEDING_SPEED = 6.0
DURATION = 10.0
CONTROL_DT = 0.1
LANES = (0.0, 6.0)

# ego start box, relative to the preceding vehicle at t = 0
EGO_X = (-35.0, -12.0)
EGO_Y = (-1.5, 7.5)
EGO_TH = (-0.2, 0.2)
EGO_V = (6.0, 12.0)
START_MARGIN = 0.1


def rng_for(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, scenario index, stream)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(stream)]))


@dataclass(frozen=True)
class Preceding:
    x: float
    y: float
    heading: float = 0.0
    speed: float = PRECEDING_SPEED

    def pose_at(self, t: float) -> tuple[float, float, float]:
        return (
            self.x + self.speed * math.cos(self.heading) * t,
            self.y + self.speed * math.sin(self.heading) * t,
            self.heading,
        )


def covering_disk(p: Preceding, r: float = DISK_R, y_off: float = DISK_Y_OFF) -> ObstacleDisk:
    return ObstacleDisk(
        p.x, p.y, r, y_off, p.speed * math.cos(p.heading), p.speed * math.sin(p.heading)
    )


@dataclass(frozen=True)
class Scenario:
    ego0: VehicleState
    preceding: Preceding
    obstacle: ObstacleDisk
    duration: float = DURATION
    seed: int = 0
    index: int = 0
    lanes: tuple[float, ...] = LANES

    def __post_init__(self):
        b = barrier_at(self.ego0, self.obstacle, 0.0)
        if not b > 0:
            raise ValueError("ego starts inside the obstacle disk")
        hx = math.cos(self.preceding.heading)
        hy = math.sin(self.preceding.heading)
        if (self.preceding.x - self.ego0.x) * hx + (self.preceding.y - self.ego0.y) * hy <= 0:
            raise ValueError("preceding vehicle must be ahead of the ego at t = 0")

    def to_dict(self) -> dict:
        return {
            "ego0": asdict(self.ego0),
            "preceding": asdict(self.preceding),
            "disk": asdict(self.obstacle),
            "duration": self.duration,
            "seed": self.seed,
            "index": self.index,
            "lanes": list(self.lanes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            VehicleState(**{k: float(v) for k, v in d["ego0"].items()}),
            Preceding(**{k: float(v) for k, v in d["preceding"].items()}),
            ObstacleDisk(**{k: float(v) for k, v in d["disk"].items()}),
            float(d.get("duration", DURATION)),
            int(d.get("seed", 0)),
            int(d.get("index", 0)),
            tuple(float(v) for v in d.get("lanes", LANES)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def barrier_at(s: VehicleState, obs: ObstacleDisk, t: float) -> float:
    cx, cy = obs.center_at(t)
    return (s.x - cx) ** 2 + (s.y - cy) ** 2 - obs.r ** 2


def psi_values(z, t, obs: ObstacleDisk, p1: float, p2: float, wheelbase=DEFAULT_WHEELBASE) -> np.ndarray:
    """``(b, psi1, psi2)`` at augmented state(s) ``z``."""
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    out = core.barrier_values(Z, t, obs.as_array(), wheelbase, float(p1), float(p2))
    return out[0] if np.ndim(z) == 1 else out


def sample_scenario(
    seed: int,
    index: int,
    gains: tuple[float, float] | None = None,
    duration: float = DURATION,
    margin: float = START_MARGIN,
    max_tries: int = 10_000,
) -> Scenario:
    """Draw an initially safe scenario for ``(seed, index)``.

    With ``gains = (p1, p2)`` the draw is also rejected unless
    ``psi1 >= 0`` and ``psi2(x0, u0 = 0) >= 0`` under those gains.
    """
    rng = rng_for(seed, index)
    pre = Preceding(0.0, 0.0, 0.0, PRECEDING_SPEED)
    obs = covering_disk(pre)
    for _ in range(max_tries):
        ego = VehicleState(
            float(rng.uniform(*EGO_X)),
            float(rng.uniform(*EGO_Y)),
            float(rng.uniform(*EGO_TH)),
            float(rng.uniform(*EGO_V)),
        )
        if barrier_at(ego, obs, 0.0) <= margin:
            continue
        if gains is not None:
            z = np.concatenate([ego.as_array(), [0.0, 0.0]])
            _, psi1, psi2 = psi_values(z, 0.0, obs, *gains)
            if psi1 < 0 or psi2 < 0:
                continue
        return Scenario(ego, pre, obs, duration, seed, index)
    raise RuntimeError(f"no valid scenario for seed={seed} index={index}")


# --------------------------------------------------------------------------
# LiDAR
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LidarConfig:
    n_rays: int = N_RAYS
    max_range: float = MAX_RANGE
    noise_frac: float = 0.0
    length: float = VEH_LENGTH
    width: float = VEH_WIDTH

    def __post_init__(self):
        if not 0.0 <= self.noise_frac <= 1.0:
            raise ValueError("noise_frac must lie in [0, 1]")


@dataclass
class LidarScan:
    ranges: np.ndarray
    max_range: float
    noise_frac: float

    def bearings(self, heading: float = 0.0) -> np.ndarray:
        return heading + 2.0 * np.pi * np.arange(self.ranges.size) / self.ranges.size


def lidar_scan(ego: VehicleState, pose, cfg: LidarConfig = LidarConfig(), rng=None) -> LidarScan:
    """Ray-cast against the preceding vehicle's rectangle.

    Ray ``k`` points along ``ego.theta + 2 pi k / n``. With ``noise_frac > 0``
    every range is scaled by an independent uniform factor in
    ``[1 - noise_frac, 1 + noise_frac]`` and clamped to ``[0, max_range]``.
    """
    px, py, ph = pose
    r = core.lidar_scan(
        float(ego.x), float(ego.y), float(ego.theta), float(px), float(py), float(ph),
        cfg.length, cfg.width, cfg.n_rays, cfg.max_range,
    )
    r = np.asarray(r, dtype=float)
    if cfg.noise_frac > 0:
        if rng is None:
            raise ValueError("noisy scans need an rng")
        r = np.clip(r * rng.uniform(1 - cfg.noise_frac, 1 + cfg.noise_frac, r.size), 0.0, cfg.max_range)
    return LidarScan(r, cfg.max_range, cfg.noise_frac)


# --------------------------------------------------------------------------
# footprint geometry
# --------------------------------------------------------------------------

def rect_corners(x, y, th, length=VEH_LENGTH, width=VEH_WIDTH) -> np.ndarray:
    c, s = math.cos(th), math.sin(th)
    hx, hy = 0.5 * length, 0.5 * width
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([x, y])


def rects_overlap(p1, p2, length=VEH_LENGTH, width=VEH_WIDTH) -> bool:
    """Separating-axis test for two equal oriented rectangles."""
    a = rect_corners(*p1, length, width)
    b = rect_corners(*p2, length, width)
    for th in (p1[2], p2[2]):
        for ax in (np.array([math.cos(th), math.sin(th)]), np.array([-math.sin(th), math.cos(th)])):
            pa, pb = a @ ax, b @ ax
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def covering_margin(r=DISK_R, y_off=DISK_Y_OFF, length=VEH_LENGTH, width=VEH_WIDTH) -> float:
    """Worst-case clearance left by the disk for two arbitrarily rotated
    rectangles: ``r - |y_off| - 2 * half_diagonal``."""
    return r - abs(y_off) - 2.0 * math.hypot(0.5 * length, 0.5 * width)


# --------------------------------------------------------------------------
# policies and rollouts
# --------------------------------------------------------------------------

@dataclass
class SynthesizedPolicy:
    """Network + QP (or the raw network with ``use_qp=False``)."""

    ckpt: object
    solver: SolverConfig = field(default_factory=SolverConfig)
    use_qp: bool = True
    name: str = "synthesized"


@dataclass
class NMPCPolicy:
    cfg: object = None  # expert.NMPCConfig; filled per scenario
    name: str = "nmpc"
    substeps: int = 10


@dataclass
class RolloutResult:
    policy: str
    index: int
    traj: Trajectory
    min_b: float
    min_dist: float
    failure: str | None
    step_times: list[float]  # per control step (network + QP, or one NMPC solve)
    interval_times: list[float]

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "index": self.index,
            "min_b": self.min_b,
            "min_dist": self.min_dist,
            "failure": self.failure or "",
            "n_points": int(len(self.traj.times)),
            "t_end": float(self.traj.times[-1]),
        }


def _metrics(traj: Trajectory, obs: ObstacleDisk):
    b = traj.extras["b"]
    d = np.sqrt(np.maximum(b + obs.r ** 2, 0.0)) - obs.r
    return float(b.min()), float(d.min())


def rollout(policy, sc: Scenario, noise_frac: float = 0.0, lidar: LidarConfig | None = None,
            control_dt: float = CONTROL_DT) -> RolloutResult:
    """Closed-loop run of one scenario.

    The observation is refreshed at every control update; metrics use the
    dense trajectory (solver steps, or RK4 substeps for the NMPC).
    """
    lcfg = lidar or LidarConfig(noise_frac=noise_frac)
    rng = rng_for(sc.seed, sc.index, stream=1)
    if isinstance(policy, NMPCPolicy):
        return _rollout_nmpc(policy, sc, control_dt)

    ck = policy.ckpt

    def source(t, z):
        return lidar_scan(VehicleState.from_array(z), sc.preceding.pose_at(t), lcfg, rng).ranges

    t0 = time.perf_counter()
    traj = integrate_synthesized(
        ck, sc.ego0, np.zeros(2), source, (0.0, sc.duration), policy.solver,
        obstacle=sc.obstacle, bounds=DEFAULT_BOUNDS, control_dt=control_dt, use_qp=policy.use_qp,
    )
    wall = time.perf_counter() - t0
    d = traj.diagnostics
    steps = [a + b for a, b in zip(d.nn_time_s, d.qp_time_s)]
    n_int = max(1, int(round(float(traj.times[-1]) / control_dt)))
    mb, md = _metrics(traj, sc.obstacle)
    return RolloutResult(policy.name, sc.index, traj, mb, md, d.failure, steps, [wall / n_int])


def _rollout_nmpc(policy: NMPCPolicy, sc: Scenario, control_dt: float) -> RolloutResult:
    from . import expert

    cfg = policy.cfg or expert.NMPCConfig()
    cfg = cfg.with_obstacle(sc.obstacle)
    s = sc.ego0.as_array()
    n = int(round(sc.duration / control_dt))
    times = [0.0]
    states = [np.concatenate([s, [0.0, 0.0]])]
    step_times = []
    failure = None
    warm = None
    for k in range(n):
        t = k * control_dt
        t0 = time.perf_counter()
        res = expert.nmpc_solve(VehicleState.from_array(s), cfg, t0=t, warm=warm, seed=(sc.seed, sc.index, k))
        step_times.append(time.perf_counter() - t0)
        if not res.feasible:
            failure = "nmpc_infeasible"
            break
        u = res.controls[0]
        sub = core.shoot_rollout(s, np.tile(u, (policy.substeps, 1)), control_dt / policy.substeps, cfg.wheelbase)
        for j in range(1, policy.substeps + 1):
            times.append(t + j * control_dt / policy.substeps)
            states.append(np.concatenate([sub[j], u]))
        s = sub[-1]
        warm = res.controls
    traj = Trajectory(np.array(times), np.array(states))
    traj.diagnostics.failure = failure
    bv = core.barrier_values(traj.states, traj.times, sc.obstacle.as_array(), cfg.wheelbase, 1.0, 1.0)
    traj.extras = {
        "b": bv[:, 0], "psi1": bv[:, 1], "psi2": bv[:, 2],
        "qp_active": np.zeros(len(times), dtype=bool), "qp_time_s": np.zeros(len(times)),
    }
    mb, md = _metrics(traj, sc.obstacle)
    return RolloutResult(policy.name, sc.index, traj, mb, md, failure, step_times, step_times)


# --------------------------------------------------------------------------
# evaluation report
# --------------------------------------------------------------------------

def _mean_std(x):
    if len(x) == 0:
        return None, None
    a = np.asarray(x, dtype=float)
    return float(a.mean()), float(a.std())


@dataclass
class EvalReport:
    config: dict
    rows: list[dict] = field(default_factory=list)
    timing: dict[str, dict] = field(default_factory=dict)  # wall-clock, not reproducible

    def policies(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["policy"] not in seen:
                seen.append(r["policy"])
        return seen

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for p in self.policies():
            rs = [r for r in self.rows if r["policy"] == p]
            mb = [r["min_b"] for r in rs]
            md = [r["min_dist"] for r in rs]
            cb, cb_sd = _mean_std(mb)
            cd, cd_sd = _mean_std(md)
            out[p] = {
                "n": len(rs),
                "safety": float(min(mb)),
                "conservativeness": cb,
                "conservativeness_std": cb_sd,
                "conservativeness_dist": cd,
                "conservativeness_dist_std": cd_sd,
                "failures": sum(1 for r in rs if r["failure"]),
                "violations": sum(1 for r in rs if r["min_b"] < -1e-6),
            }
        return out

    def to_json(self, timing: bool = False) -> str:
        doc = {"format_version": 1, "config": self.config, "aggregates": self.aggregates(), "scenarios": self.rows}
        if timing:
            doc["timing"] = self.timing
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["policy", "index", "min_b", "min_dist", "failure", "n_points", "t_end"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()

    def save(self, path) -> None:
        """``path`` gets the JSON report, ``<stem>.csv`` the per-scenario
        table and ``<stem>.timing.json`` the wall-clock numbers."""
        path = str(path)
        stem = path[:-5] if path.endswith(".json") else path
        with open(path, "w") as fh:
            fh.write(self.to_json())
        with open(stem + ".csv", "w") as fh:
            fh.write(self.to_csv())
        with open(stem + ".timing.json", "w") as fh:
            json.dump(self.timing, fh, indent=2, sort_keys=True)


def _timing_summary(results: list[RolloutResult]) -> dict:
    steps = [t for r in results for t in r.step_times]
    ints = [t for r in results for t in r.interval_times]
    m, s = _mean_std(steps)
    mi, si = _mean_std(ints)
    return {"per_step_mean_s": m, "per_step_std_s": s, "per_interval_mean_s": mi, "per_interval_std_s": si,
            "n_steps": len(steps)}


def evaluate(policies, n_scenarios: int = 100, noise_frac: float = 0.4, seed: int = 0,
             gains: tuple[float, float] | None = None, duration: float = DURATION,
             keep: bool = False):
    """Run every policy on the same ``n_scenarios`` scenarios.

    ``gains = (p1, p2)`` restricts scenarios to those meeting the HOCBF
    start conditions under those gains. Returns ``(EvalReport, results)``
    where ``results`` is the list of rollouts when ``keep`` is set.
    """
    report = EvalReport(
        {"n_scenarios": n_scenarios, "noise_frac": noise_frac, "seed": seed, "duration": duration,
         "gains": list(gains) if gains is not None else None, "policies": [p.name for p in policies]}
    )
    kept = []
    by_policy: dict[str, list[RolloutResult]] = {p.name: [] for p in policies}
    for i in range(n_scenarios):
        sc = sample_scenario(seed, i, gains=gains, duration=duration)
        for p in policies:
            res = rollout(p, sc, noise_frac=noise_frac)
            report.rows.append(res.summary())
            by_policy[p.name].append(res)
            if keep:
                kept.append(res)
            else:
                res.traj = None  # type: ignore[assignment]
    report.timing = {name: _timing_summary(rs) for name, rs in by_policy.items()}
    return report, kept


# --------------------------------------------------------------------------
# SVG overhead view
# --------------------------------------------------------------------------

def render_svg(data: dict, path, scenario: Scenario | None = None, snapshots: int = 5,
               px_per_m: float = 8.0) -> None:
    """Overhead view of one trajectory (columns as in the trajectory CSV)."""
    t, x, y = data["t"], data["x"], data["y"]
    th = data["theta"]
    xs = [x.min() - 10, x.max() + 10]
    ys = [min(y.min(), -4.0) - 4, max(y.max(), 8.0) + 4]
    pre = None
    if scenario is not None:
        pre = np.array([scenario.preceding.pose_at(tt) for tt in t])
        xs = [min(xs[0], pre[:, 0].min() - 10), max(xs[1], pre[:, 0].max() + 10)]
    W = (xs[1] - xs[0]) * px_per_m
    H = (ys[1] - ys[0]) * px_per_m

    def P(px, py):
        return (px - xs[0]) * px_per_m, (ys[1] - py) * px_per_m

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.1f} {H:.1f}">', f'<rect width="{W:.1f}" height="{H:.1f}" fill="#f4f4f4"/>']
    for ly in (-2.0, 3.0, 9.0):
        a, b = P(xs[0], ly), P(xs[1], ly)
        out.append(f'<line x1="{a[0]:.1f}" y1="{a[1]:.1f}" x2="{b[0]:.1f}" y2="{b[1]:.1f}" '
                   f'stroke="#999" stroke-dasharray="8,6"/>')
    pts = " ".join("%.1f,%.1f" % P(a, b) for a, b in zip(x, y))
    out.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fbf" stroke-width="2"/>')
    idx = np.linspace(0, len(t) - 1, max(2, snapshots)).astype(int)

    def car(px, py, ph, color):
        c = rect_corners(px, py, ph)
        s = " ".join("%.1f,%.1f" % P(a, b) for a, b in c)
        return f'<polygon points="{s}" fill="{color}" fill-opacity="0.6" stroke="#222"/>'

    for i in idx:
        out.append(car(x[i], y[i], th[i], "#1f5fbf"))
        if pre is not None:
            out.append(car(*pre[i], "#c0392b"))
            cx, cy = scenario.obstacle.center_at(t[i])
            cc = P(cx, cy)
            out.append(f'<circle cx="{cc[0]:.1f}" cy="{cc[1]:.1f}" r="{scenario.obstacle.r * px_per_m:.1f}" '
                       f'fill="none" stroke="#c0392b" stroke-dasharray="4,3"/>')
    if "b" in data and np.all(np.isfinite(data["b"])):
        out.append(f'<text x="10" y="20" font-family="monospace" font-size="14">min b = {np.min(data["b"]):.3f}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
