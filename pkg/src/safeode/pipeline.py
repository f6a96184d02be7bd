"""Training loop, checkpoints, and the open/closed-loop evaluation drivers."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import neuralnet as nn
from . import simworld
from .dynamics import DEFAULT_BOUNDS, DEFAULT_WHEELBASE
from .expert import Dataset, NMPCConfig, TrajectoryData
from .hocbf import ObstacleDisk
from .odeint import SolverConfig, SolverTape, SynthesizedField, taped_steps

log = logging.getLogger(__name__)

CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    seq_len: int = 10
    epochs: int = 20  # stage-2 / joint epochs
    lr: float = 1e-3
    two_stage: bool = True
    stage1_epochs: int = 200
    stage1_lr: float = 3e-4
    seed: int = 0
    loss: str = "mse"
    h: float = 0.01
    method: str = "fixed_adams"
    widths: tuple[int, ...] = nn.DEFAULT_WIDTHS
    gains0: tuple[float, float, float] = (1.0, 1.0, 1.0)
    theta_p0: float = 1.0
    max_skip_frac: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be at least 1")
        if self.loss != "mse":
            raise ValueError("only the mse loss is implemented")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["gains0"] = list(self.gains0)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("widths", "gains0"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ModelCheckpoint:
    spec: nn.MLPSpec
    params: nn.MLPParams
    gains: tuple[float, float, float]
    theta_p: float
    norm: nn.Normalization = field(default_factory=nn.Normalization)
    wheelbase: float = DEFAULT_WHEELBASE
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    format_version: int = CKPT_VERSION

    def __post_init__(self):
        if not (min(self.gains) > 0 and self.theta_p > 0):
            raise ValueError("gains and theta_p must be positive")

    @classmethod
    def fresh(cls, spec: nn.MLPSpec, seed: int = 0, gains=(1.0, 1.0, 1.0), theta_p=1.0, **kw):
        params = nn.MLPParams.init(spec, np.random.default_rng(np.random.SeedSequence([seed, 0])))
        return cls(spec, params, tuple(float(g) for g in gains), float(theta_p), seed=seed, **kw)

    def copy(self) -> "ModelCheckpoint":
        return replace(self, params=self.params.copy(), metadata=dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "spec": {"layer_widths": list(self.spec.layer_widths), "activation": self.spec.activation},
            "weights": [float(v) for v in self.params.to_flat()],
            "gains": [float(g) for g in self.gains],
            "theta_p": float(self.theta_p),
            "normalization": self.norm.to_dict(),
            "wheelbase": self.wheelbase,
            "train_config": self.train_config,
            "seed": self.seed,
            "metadata": self.metadata,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCheckpoint":
        if d.get("format_version") != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint format {d.get('format_version')!r}")
        spec = nn.MLPSpec(tuple(d["spec"]["layer_widths"]), d["spec"]["activation"])
        return cls(
            spec,
            nn.MLPParams.from_flat(spec, d["weights"]),
            tuple(float(g) for g in d["gains"]),  # type: ignore[arg-type]
            float(d["theta_p"]),
            nn.Normalization.from_dict(d["normalization"]),
            float(d["wheelbase"]),
            d.get("train_config", {}),
            int(d.get("seed", 0)),
            d.get("metadata", {}),
        )

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_field(ckpt: ModelCheckpoint, obs, lidar, use_qp=True) -> SynthesizedField:
    return SynthesizedField(ckpt.spec, ckpt.params, ckpt.norm, ckpt.gains, ckpt.theta_p, obs, lidar,
                            bounds=DEFAULT_BOUNDS, wheelbase=ckpt.wheelbase, use_qp=use_qp)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

def _obs_at(obs: ObstacleDisk, t0: float) -> np.ndarray:
    """Disk parameters with the clock moved so that local time 0 is ``t0``."""
    cx, cy = obs.cx + obs.vx * t0, obs.cy + obs.vy * t0
    return np.array([cx, cy, obs.r, obs.y_off, obs.vx, obs.vy])


@dataclass
class SeqBatch:
    z0: np.ndarray  # (B, 6)
    lidar: np.ndarray  # (B, S, 100)
    target: np.ndarray  # (B, S, 2): u at the end of interval j
    obs: np.ndarray  # (B, 6), local clock


def make_batch(trajs: list[TrajectoryData], picks, seq_len: int) -> SeqBatch:
    """``picks`` holds (trajectory index, start step) pairs."""
    z0, lid, tgt, obs = [], [], [], []
    for ti, k0 in picks:
        tr = trajs[ti]
        z0.append(np.concatenate([tr.states[k0], tr.u[k0]]))
        lid.append(tr.lidar[k0:k0 + seq_len])
        tgt.append(tr.ustar[k0:k0 + seq_len])
        obs.append(_obs_at(tr.scenario.obstacle, float(tr.t[k0])))
    return SeqBatch(np.array(z0), np.array(lid), np.array(tgt), np.array(obs))


def sequence_loss(ckpt: ModelCheckpoint, batch: SeqBatch, dt: float, solver: SolverConfig,
                  use_qp: bool = True, grad: bool = True):
    """Taped integration of a batch of sequences and the MSE loss.

    Returns ``(loss, field_grads or None, n_dead, n)``.
    """
    B, S, _ = batch.lidar.shape
    fld = make_field(ckpt, batch.obs, batch.lidar[:, 0], use_qp=use_qp)
    tape = SolverTape()
    node = tape.leaf(batch.z0)
    ends = []
    for j in range(S):
        fld.set_lidar(batch.lidar[:, j])
        _, nodes = taped_steps(tape, fld, node, j * dt, (j + 1) * dt, solver)
        node = nodes[-1]
        ends.append(node)
    alive = fld.alive.copy()
    n_alive = int(alive.sum())
    if n_alive == 0:
        return float("nan"), None, B, B
    U = np.stack([tape.values[j][:, 4:6] for j in ends], axis=1)  # (B, S, 2)
    err = np.where(alive[:, None, None], U - batch.target, 0.0)
    denom = n_alive * S
    loss = float(np.sum(err * err) / denom)
    if not grad:
        return loss, None, B - n_alive, B
    seeds = {}
    for j, nd in enumerate(ends):
        g = np.zeros((B, 6))
        g[:, 4:6] = 2.0 * err[:, j] / denom
        seeds[nd] = g
    grads = fld.zero_grads()
    tape.backward(seeds, grads)
    return loss, grads, B - n_alive, B


def rate_targets(trajs: list[TrajectoryData], dt: float):
    """Stage-one data: network inputs and the rate ``(u* - u) / dt``."""
    X, Y = [], []
    norm = nn.Normalization()
    for tr in trajs:
        X.append(norm.build_input(tr.lidar, tr.states[:, 2], tr.states[:, 3], tr.u))
        Y.append((tr.ustar - tr.u) / dt)
    return np.concatenate(X), np.concatenate(Y)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    curve: list[dict]
    skipped: int = 0
    seen: int = 0
    flagged: bool = False


def _starts(n_steps: int, seq_len: int) -> int:
    return max(1, n_steps - seq_len + 1)


def _log_gains(ck: ModelCheckpoint) -> np.ndarray:
    return np.log(np.array([*ck.gains, ck.theta_p], dtype=float))


def _set_log_gains(ck: ModelCheckpoint, lg: np.ndarray) -> None:
    g = np.exp(lg)
    ck.gains = (float(g[0]), float(g[1]), float(g[2]))
    ck.theta_p = float(g[3])


def validation_loss(ck: ModelCheckpoint, trajs, dt, solver, seq_len, use_qp=True) -> float:
    """Mean sequence loss over non-overlapping windows of ``trajs``."""
    losses = []
    for i, tr in enumerate(trajs):
        picks = [(i, k) for k in range(0, len(tr) - seq_len + 1, seq_len)]
        if not picks:
            continue
        loss, _, _, _ = sequence_loss(ck, make_batch(trajs, picks, seq_len), dt, solver, use_qp, grad=False)
        losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def _stage1_val(ck, trajs, dt) -> float:
    if not trajs:
        return float("nan")
    X, Y = rate_targets(trajs, dt)
    P = nn.forward(X, ck.params, ck.spec) * np.asarray(ck.norm.out_scale)
    E = (P - Y) / np.asarray(ck.norm.out_scale)
    return float(np.mean(np.sum(E * E, axis=1)))


def train(data: Dataset, cfg: TrainConfig = TrainConfig(), progress=None,
          train_trajs: list[TrajectoryData] | None = None, val_trajs: list[TrajectoryData] | None = None) -> TrainResult:
    """Fit the synthesized model to the NMPC labels.

    Two-stage mode: stage one regresses the network output on the rate
    targets ``(u* - u) / dt`` without the QP; stage two trains only the
    class-K gains and ``theta_p`` through the taped ODE with the QP active.
    Joint mode trains everything through the taped ODE from the start.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    spec = nn.MLPSpec(tuple(cfg.widths))
    ck = ModelCheckpoint.fresh(spec, cfg.seed, cfg.gains0, cfg.theta_p0, train_config=cfg.to_dict())
    trajs = train_trajs if train_trajs is not None else data.train
    vals = val_trajs if val_trajs is not None else data.validation
    dt = data.dt
    solver = SolverConfig(cfg.method, h=cfg.h)
    curve: list[dict] = []
    skipped = seen = 0
    out_scale = np.asarray(ck.norm.out_scale)

    if cfg.two_stage and cfg.stage1_epochs > 0:
        X, Y = rate_targets(trajs, dt)
        Yn = Y / out_scale
        opt = nn.OptimizerState(lr=cfg.stage1_lr)
        nb = cfg.batch_size * cfg.seq_len
        for ep in range(cfg.stage1_epochs):
            perm = rng.permutation(len(X))
            tot = 0.0
            for s in range(0, len(X), nb):
                idx = perm[s:s + nb]
                out, tp = nn.forward(X[idx], ck.params, spec, tape=True)
                E = out - Yn[idx]
                loss = float(np.mean(np.sum(E * E, axis=1)))
                if not math.isfinite(loss):
                    raise TrainingDiverged("non-finite stage-one loss", ck)
                g, _ = nn.backward(tp, 2.0 * E / len(idx))
                nn.rmsprop_step(ck.params, g, opt)
                tot += loss * len(idx)
            rec = {"stage": 1, "epoch": ep, "train_loss": tot / len(X), "val_loss": _stage1_val(ck, vals, dt)}
            curve.append(rec)
            if progress:
                progress(rec)

    if cfg.epochs > 0:
        joint = not cfg.two_stage
        opt_n = nn.OptimizerState(lr=cfg.lr)
        opt_g = nn.OptimizerState(lr=cfg.lr)
        lg = _log_gains(ck)
        for ep in range(cfg.epochs):
            order = rng.permutation(len(trajs))
            picks = [(int(i), int(rng.integers(_starts(len(trajs[i]), cfg.seq_len)))) for i in order]
            tot, cnt, ep_skip = 0.0, 0, 0
            for s in range(0, len(picks), cfg.batch_size):
                batch = make_batch(trajs, picks[s:s + cfg.batch_size], cfg.seq_len)
                loss, grads, n_dead, n = sequence_loss(ck, batch, dt, solver)
                skipped += n_dead
                ep_skip += n_dead
                seen += n
                if grads is None:
                    continue
                if not math.isfinite(loss):
                    raise TrainingDiverged("non-finite loss", ck)
                last_good = ck.copy()
                d1, d2, d3, dth = grads.gains_and_penalty(ck.gains[2], ck.theta_p)
                glog = np.array([d1, d2, d3, dth]) * np.exp(lg)
                nn.rmsprop_step([lg], [glog], opt_g)
                _set_log_gains(ck, lg)
                if joint:
                    nn.rmsprop_step(ck.params, grads.mlp, opt_n)
                if not (np.all(np.isfinite(lg)) and np.all(np.isfinite(ck.params.to_flat()))):
                    raise TrainingDiverged("non-finite parameters", last_good)
                tot += loss * (n - n_dead)
                cnt += n - n_dead
            rec = {
                "stage": 2 if cfg.two_stage else 0,
                "epoch": ep,
                "train_loss": tot / cnt if cnt else float("nan"),
                "val_loss": validation_loss(ck, vals, dt, solver, cfg.seq_len),
                "skipped": ep_skip,
                "gains": list(ck.gains),
                "theta_p": ck.theta_p,
            }
            curve.append(rec)
            if progress:
                progress(rec)

    flagged = seen > 0 and skipped / seen >= cfg.max_skip_frac
    if flagged:
        log.warning("skipped-sample rate %.1f%% above limit", 100.0 * skipped / seen)
    ck.metadata = {"curve": curve, "skipped": skipped, "seen": seen, "flagged": flagged,
                   "dataset_seed": data.manifest.get("seed")}
    return TrainResult(ck, curve, skipped, seen, flagged)


# --------------------------------------------------------------------------
# open-loop evaluation
# --------------------------------------------------------------------------

@dataclass
class OpenLoopResult:
    names: list[str]
    steps: np.ndarray
    t: np.ndarray
    pred: np.ndarray  # (N, 2)
    label: np.ndarray  # (N, 2)

    @property
    def rmse(self) -> tuple[float, float]:
        e = self.pred - self.label
        return tuple(float(np.sqrt(np.mean(e[:, i] ** 2))) for i in range(2))  # type: ignore[return-value]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj", "step", "t", "u1_pred", "u2_pred", "ustar1", "ustar2"])
            for i in range(len(self.t)):
                w.writerow([self.names[i], int(self.steps[i]), repr(float(self.t[i]))]
                           + [repr(float(v)) for v in self.pred[i]] + [repr(float(v)) for v in self.label[i]])

    def summary(self) -> dict:
        r1, r2 = self.rmse
        return {"n": int(len(self.t)), "rmse_u1": r1, "rmse_u2": r2}


def _model_predictor(ck: ModelCheckpoint, dt: float, use_qp: bool = True):
    def predict(Z, lidar, obs):
        fld = make_field(ck, obs, lidar, use_qp=use_qp)
        # one RK4 step of length dt
        k1 = fld(0.0, Z)
        k2 = fld(0.5 * dt, Z + 0.5 * dt * k1)
        k3 = fld(0.5 * dt, Z + 0.5 * dt * k2)
        k4 = fld(dt, Z + dt * k3)
        Zn = Z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return Zn[:, 4:6]

    return predict


def eval_open(ckpt: ModelCheckpoint | None, data: Dataset, trajs=None, predictor=None, use_qp=True) -> OpenLoopResult:
    """One fixed step of the model from every recorded ``(x, u, I)``.

    The prediction of ``u(t + dt)`` is compared with the recorded label.
    ``predictor(Z, lidar, obs)`` replaces the model when given.
    """
    trajs = trajs if trajs is not None else data.trajectories
    Z = np.concatenate([np.column_stack([tr.states, tr.u]) for tr in trajs])
    L = np.concatenate([tr.lidar for tr in trajs])
    O = np.concatenate([[_obs_at(tr.scenario.obstacle, float(t)) for t in tr.t] for tr in trajs])
    label = np.concatenate([tr.ustar for tr in trajs])
    names = [tr.name for tr in trajs for _ in range(len(tr))]
    steps = np.concatenate([np.arange(len(tr)) for tr in trajs])
    t = np.concatenate([tr.t for tr in trajs])
    if predictor is None:
        predictor = _model_predictor(ckpt, data.dt, use_qp)
    pred = np.asarray(predictor(Z, L, O), dtype=float)
    return OpenLoopResult(names, steps, t, pred, label)


# --------------------------------------------------------------------------
# closed-loop evaluation
# --------------------------------------------------------------------------

def eval_closed(ckpt: ModelCheckpoint, n_scenarios: int = 100, noise: float = 0.4, solver: str = "dopri5",
                seed: int = 0, include_raw: bool = True, include_nmpc: bool = True,
                nmpc: NMPCConfig | None = None, timing_probe: int = 3, keep: bool = False,
                duration: float = simworld.DURATION):
    """Closed-loop test of the filtered policy (and baselines) on shared scenarios.

    Scenarios must satisfy the HOCBF start conditions under the checkpoint
    gains with ``u0 = 0``. The timing sidecar also holds a short probe with
    the other solver type so that both adaptive and fixed-step costs are
    reported.
    """
    scfg = SolverConfig(solver)
    pols = [simworld.SynthesizedPolicy(ckpt, scfg, True, "synthesized")]
    if include_raw:
        pols.append(simworld.SynthesizedPolicy(ckpt, scfg, False, "raw_neural_ode"))
    if include_nmpc:
        pols.append(simworld.NMPCPolicy(nmpc or NMPCConfig()))
    report, kept = simworld.evaluate(pols, n_scenarios, noise, seed, gains=ckpt.gains[:2], duration=duration,
                                     keep=keep)
    report.config["solver"] = scfg.method
    solver_timing = {scfg.method: report.timing.get("synthesized")}
    other = "fixed_adams" if scfg.method == "dopri5" else "dopri5"
    if timing_probe > 0 and n_scenarios > 0:
        probe = simworld.SynthesizedPolicy(ckpt, SolverConfig(other), True, "synthesized")
        rs = []
        for i in range(min(timing_probe, n_scenarios)):
            sc = simworld.sample_scenario(seed, i, gains=ckpt.gains[:2], duration=duration)
            rs.append(simworld.rollout(probe, sc, noise_frac=noise))
        solver_timing[other] = simworld._timing_summary(rs)
    report.timing["synthesized_by_solver"] = solver_timing
    return report, kept


def write_open_loop(res: OpenLoopResult, path) -> None:
    """CSV at ``path`` plus a JSON summary next to it."""
    res.write_csv(path)
    stem = path[:-4] if str(path).endswith(".csv") else str(path)
    with open(stem + ".summary.json", "w") as fh:
        json.dump(res.summary(), fh, indent=2, sort_keys=True)

