"""Command line entry point: ``safeode <subcommand> ...``.

``gen-data``, ``train`` and ``eval-closed`` accept ``--config FILE`` (JSON)
with sections ``gen``, ``train``, ``eval`` and ``nmpc``. Values given on the
command line win over the config file, which wins over the built-in
defaults. The merged configuration is written into each output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import core, expert, pipeline, simworld
from .odeint import TRAJ_COLUMNS, write_trajectory_csv

log = logging.getLogger("safeode")


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise SystemExit(f"config {path}: top level must be an object")
    return cfg


def _pick(args, cfg: dict, name: str, default):
    """Command line value, else config value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _nmpc_config(cfg: dict) -> expert.NMPCConfig:
    base = expert.NMPCConfig().to_dict()
    base.update(cfg.get("nmpc", {}))
    return expert.NMPCConfig.from_dict(base)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    sec = cfg.get("gen", {})
    d = expert.GenConfig()
    gc = expert.GenConfig(
        n_init=int(_pick(args, sec, "n_init", d.n_init)),
        steps=int(_pick(args, sec, "steps", d.steps)),
        dt=float(_pick(args, sec, "dt", d.dt)),
        seed=int(_pick(args, sec, "seed", d.seed)),
        n_val=int(sec.get("n_val", d.n_val)),
        noise_frac=float(sec.get("noise_frac", d.noise_frac)),
        max_fail_frac=float(sec.get("max_fail_frac", d.max_fail_frac)),
        nmpc=_nmpc_config(cfg),
    )
    t0 = time.perf_counter()

    def progress(k, n):
        if k % 20 == 0 or k == n:
            log.info("labeled %d/%d (%.0f s)", k, n, time.perf_counter() - t0)

    try:
        man = expert.gen_dataset(args.out, gc, workers=args.workers, progress=progress)
    except expert.DatasetAbort as exc:
        log.error("%s", exc)
        with open(os.path.join(args.out, "failures.json"), "w") as fh:
            json.dump(exc.report, fh, indent=2, sort_keys=True)
        return 2
    print(json.dumps(man["counts"], sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    sec = cfg.get("train", {})
    base = pipeline.TrainConfig().to_dict()
    base.update(sec)
    for key, name in (("epochs", "epochs"), ("batch_size", "batch"), ("seq_len", "seq"), ("lr", "lr"),
                      ("two_stage", "two_stage"), ("seed", "seed"), ("stage1_epochs", "stage1_epochs"),
                      ("method", "method")):
        v = getattr(args, name, None)
        if v is not None:
            base[key] = v
    tc = pipeline.TrainConfig.from_dict(base)
    data = expert.load_dataset(args.data)

    def progress(rec):
        log.info("stage %d epoch %d train %.5g val %.5g", rec["stage"], rec["epoch"], rec["train_loss"],
                 rec["val_loss"])

    try:
        res = pipeline.train(data, tc, progress=progress)
    except pipeline.TrainingDiverged as exc:
        log.error("%s; writing last good checkpoint", exc)
        exc.checkpoint.save(args.out)
        return 3
    res.checkpoint.save(args.out)
    stem = args.out[:-5] if args.out.endswith(".json") else args.out
    with open(stem + ".curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "train_loss", "val_loss"])
        for r in res.curve:
            w.writerow([r["stage"], r["epoch"], repr(float(r["train_loss"])), repr(float(r["val_loss"]))])
    if res.flagged:
        log.warning("run flagged: %d of %d samples skipped", res.skipped, res.seen)
    print(json.dumps({"final": res.curve[-1] if res.curve else None, "skipped": res.skipped,
                      "seen": res.seen, "flagged": res.flagged}, sort_keys=True))
    return 0


def cmd_eval_open(args) -> int:
    ck = pipeline.ModelCheckpoint.load(args.ckpt)
    data = expert.load_dataset(args.data)
    trajs = data.validation if args.split == "validation" else (
        data.train if args.split == "train" else data.trajectories)
    res = pipeline.eval_open(ck, data, trajs)
    pipeline.write_open_loop(res, args.out)
    print(json.dumps(res.summary(), sort_keys=True))
    return 0


def cmd_eval_closed(args) -> int:
    cfg = _load_config(args.config)
    sec = cfg.get("eval", {})
    ck = pipeline.ModelCheckpoint.load(args.ckpt)
    n = int(_pick(args, sec, "scenarios", 100))
    noise = float(_pick(args, sec, "noise", 0.4))
    solver = str(_pick(args, sec, "solver", "dopri5"))
    seed = int(_pick(args, sec, "seed", 0))
    keep = args.traj_dir is not None
    report, kept = pipeline.eval_closed(
        ck, n, noise, solver, seed=seed, include_raw=not args.no_raw, include_nmpc=not args.no_nmpc,
        nmpc=_nmpc_config(cfg), keep=keep, duration=float(sec.get("duration", simworld.DURATION)),
    )
    report.config["checkpoint"] = os.path.basename(args.ckpt)
    report.config["nmpc"] = _nmpc_config(cfg).to_dict()
    report.save(args.out)
    if keep:
        os.makedirs(args.traj_dir, exist_ok=True)
        done = set()
        for r in kept:
            write_trajectory_csv(r.traj, os.path.join(args.traj_dir, f"{r.policy}_{r.index:03d}.csv"))
            if r.index not in done:
                sc = simworld.sample_scenario(seed, r.index, gains=ck.gains[:2],
                                              duration=float(sec.get("duration", simworld.DURATION)))
                sc.save(os.path.join(args.traj_dir, f"scenario_{r.index:03d}.json"))
                done.add(r.index)
    print(json.dumps(report.aggregates(), indent=2, sort_keys=True))
    return 0


def _read_any_traj(path) -> dict[str, np.ndarray]:
    """Synthesized-trajectory CSV or a dataset trajectory CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SystemExit(f"{path}: empty trajectory")
    out = {}
    for key in ("t", "x", "y", "theta", "v", "u1", "u2", "b"):
        if key in rows[0]:
            out[key] = np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])
    missing = {"t", "x", "y", "theta"} - set(out)
    if missing:
        raise SystemExit(f"{path}: missing columns {sorted(missing)}")
    return out


def _scenario_for(path, explicit):
    if explicit:
        return simworld.Scenario.load(explicit)
    # dataset trajectories: look the scenario up in the manifest
    man = os.path.join(os.path.dirname(os.path.abspath(path)), "manifest.json")
    if os.path.exists(man):
        with open(man) as fh:
            m = json.load(fh)
        for e in m.get("trajectories", []):
            if e["file"] == os.path.basename(path):
                return simworld.Scenario.from_dict(e["scenario"])
    return None


def cmd_plot(args) -> int:
    data = _read_any_traj(args.traj)
    sc = _scenario_for(args.traj, args.scenario)
    if "b" not in data and sc is not None:
        Z = np.column_stack([data["x"], data["y"], data["theta"], data.get("v", np.zeros_like(data["x"]))])
        data["b"] = core.barrier_values(Z, data["t"], sc.obstacle.as_array(), 2.0, 1.0, 1.0)[:, 0]
    if args.out.endswith(".svg"):
        simworld.render_svg(data, args.out, scenario=sc, snapshots=args.snapshots)
    else:
        cols = [c for c in TRAJ_COLUMNS if c in data]
        pre = sc is not None
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols + (["pre_x", "pre_y", "pre_theta"] if pre else []))
            for i in range(len(data["t"])):
                row = [repr(float(data[c][i])) for c in cols]
                if pre:
                    row += [repr(float(v)) for v in sc.preceding.pose_at(float(data["t"][i]))]
                w.writerow(row)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safeode", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="label scenarios with the NMPC expert")
    p.add_argument("--n-init", dest="n_init", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="fit the synthesized model")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seq", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--two-stage", dest="two_stage", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    p.add_argument("--method", choices=["fixed_adams", "rk4"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-open", help="one-step prediction error on recorded data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "validation"], default="all")
    p.set_defaults(fn=cmd_eval_open)

    p = sub.add_parser("eval-closed", help="closed-loop scenarios with LiDAR noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenarios", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--solver", choices=["dopri5", "fixed-adams", "fixed_adams", "rk4"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-raw", action="store_true", help="skip the unfiltered baseline")
    p.add_argument("--no-nmpc", action="store_true", help="skip the NMPC baseline")
    p.add_argument("--traj-dir", help="also write every rollout as a trajectory CSV")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval_closed)

    p = sub.add_parser("plot", help="plot data (CSV) or an overhead view (SVG)")
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", help="scenario JSON (found via manifest.json for dataset files)")
    p.add_argument("--snapshots", type=int, default=5)
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
