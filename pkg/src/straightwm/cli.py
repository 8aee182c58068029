"""Command-line entry point: ``straightwm <command> [--config FILE] [key=value ...]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import linear_analysis as la
from .config import RunConfig
from .envs import TrajectoryDataset, generate_dataset, load_layout, make_env, sample_goal_task
from .errors import MissingInputError, StraightWMError
from .model import WorldModel
from .planning import run_mpc, run_open_loop, success_curve_rate, write_curve_csv, write_eval_csv
from .training import train

log = logging.getLogger("straightwm")

COMMANDS = ("gen-data", "train", "eval-plan", "mpc", "analyze-linear", "sweep-theorem", "heatmap", "pca", "curvature")
PROBE_SEED_OFFSET = 10_000


# bookkeeping ----------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir: Path, cfg: RunConfig, seed, command, artifacts):
    """Merge this command's artifacts into ``manifest.json``; no timestamps, so reruns are identical."""
    path = run_dir / "manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.setdefault("commands", {})[command] = {
        "config": cfg.to_text().splitlines(),
        "config_digest": cfg.digest(),
        "seed": seed,
        "artifacts": {Path(a).name: _sha256(Path(a)) for a in artifacts},
    }
    data["run"] = cfg.run_name
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _env(cfg: RunConfig):
    return make_env(cfg.env, load_layout(cfg.layout) if cfg.layout else None)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _dataset(cfg: RunConfig, seed, generate=False):
    if cfg.dataset:
        return TrajectoryDataset.load(_require(Path(cfg.dataset), "dataset"))
    path = cfg.run_dir(seed) / "dataset.stpl"
    if path.exists():
        return TrajectoryDataset.load(path)
    if not generate:
        raise MissingInputError(f"dataset not found: {path} (run gen-data first)")
    return generate_dataset(_env(cfg), cfg.n_traj or None, cfg.traj_len or None, seed=seed)


def _checkpoint(cfg: RunConfig, seed) -> WorldModel:
    path = Path(cfg.checkpoint) if cfg.checkpoint else cfg.run_dir(seed) / "model.ckpt"
    return WorldModel.load(_require(path, "checkpoint"))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _probe_trajectories(cfg: RunConfig, seed, env):
    return generate_dataset(env, cfg.n_probe_traj, cfg.traj_len or None, seed=PROBE_SEED_OFFSET + seed)


def _goal_cell(cfg: RunConfig, layout):
    if cfg.goal_cell:
        return tuple(int(x) for x in cfg.goal_cell.split(","))
    return layout.free_cells()[0]


# commands -------------------------------------------------------------------


def cmd_gen_data(cfg, seed, out):
    ds = generate_dataset(_env(cfg), cfg.n_traj or None, cfg.traj_len or None, seed=seed)
    path = out / "dataset.stpl"
    ds.save(path)
    return [path]


def cmd_train(cfg, seed, out):
    ds = _dataset(cfg, seed, generate=True)
    model = WorldModel(cfg.model_config(), seed=seed)
    model, report = train(model, ds, cfg.train_config(seed))
    ck, rep = out / "model.ckpt", out / "train_report.csv"
    model.save(ck)
    report.write_csv(rep)
    return [ck, rep]


def _eval(cfg, seed, out, mode):
    env = _env(cfg)
    model = _checkpoint(cfg, seed)
    pcfg = cfg.plan_config(seed)
    rows, results = [], []
    for i in range(cfg.n_tasks):
        task = sample_goal_task(env, 1000 * seed + i, cfg.budget)
        res = run_open_loop(model, env, task, pcfg) if mode == "open_loop" else run_mpc(model, env, task, pcfg)
        results.append(res)
        rows.append(
            dict(
                task_id=i,
                seed=seed,
                planner=cfg.planner,
                mode=mode,
                success=int(res.success),
                final_distance=repr(float(res.final_distance)),
                wall_time=repr(res.wall_time) if cfg.timing else "",
            )
        )
    path = out / f"eval_{cfg.planner}_{mode}.csv"
    write_eval_csv(path, rows)
    paths = [path]
    if mode == "mpc":
        curve = out / f"success_curve_{cfg.planner}.csv"
        write_curve_csv(curve, success_curve_rate(results))
        paths.append(curve)
    return paths, float(np.mean([r.success for r in results]))


def cmd_eval_plan(cfg, seed, out):
    return _eval(cfg, seed, out, "open_loop")


def cmd_mpc(cfg, seed, out):
    return _eval(cfg, seed, out, "mpc")


def cmd_analyze_linear(cfg, seed, out):
    sys_ = la.LinearSystem(cfg.matrix("linear_a"), cfg.matrix("linear_b"), cfg.linear_k)
    row = la.analyze(sys_).as_row()
    path = out / "linear_report.csv"
    _write_rows(path, ["quantity", "value"], [(k, "" if v is None else v) for k, v in row.items()])
    return [path]


def cmd_sweep_theorem(cfg, seed, out):
    eps = tuple(float(x) for x in cfg.sweep_eps.split(","))
    ks = tuple(int(x) for x in cfg.sweep_horizons.split(","))
    rows = la.sweep_theorem(cfg.sweep_draws, cfg.sweep_dim, eps, ks, cfg.sweep_noise, seed)
    path = out / "sweep_theorem.csv"
    la.write_csv(path, rows, ["draw", "target_epsilon"] + la.SWEEP_COLUMNS[1:])
    summary = out / "sweep_summary.csv"
    _write_rows(
        summary,
        ["draws", "violations", "max_gram_jacobian_error", "max_lemma_relative_gap"],
        [
            (
                len(rows),
                la.sweep_violations(rows),
                max(r["gram_jacobian_error"] for r in rows),
                max(r["lemma_relative_gap"] for r in rows),
            )
        ],
    )
    return [path, summary]


def cmd_heatmap(cfg, seed, out):
    env = _env(cfg)
    model = _checkpoint(cfg, seed)
    goal = _goal_cell(cfg, env.layout)
    r = cfg.heatmap_resolution
    lat = dg.latent_heatmap(model, env, goal, cfg.heatmap_source, r)
    geo = dg.astar_geodesic(env.layout, goal, cfg.connectivity, cfg.teleport_aware, r)
    rho, r = dg.heatmap_agreement(lat, geo)
    paths = []
    for tag, grid in (("latent", lat), ("geodesic", geo)):
        c, p = out / f"heatmap_{tag}.csv", out / f"heatmap_{tag}.pgm"
        grid.write_csv(c)
        grid.write_pgm(p)
        paths += [c, p]
    agree = out / "heatmap_agreement.csv"
    _write_rows(agree, ["source", "connectivity", "spearman", "pearson"], [(cfg.heatmap_source, cfg.connectivity, rho, r)])
    return paths + [agree]


def cmd_pca(cfg, seed, out):
    env = _env(cfg)
    model = _checkpoint(cfg, seed)
    probes = _probe_trajectories(cfg, seed, env)
    f = model.config.frameskip
    seqs, ids, steps = [], [], []
    for i in range(probes.n_traj):
        z = model.encode_numpy(dg.frameskipped_observations(env, probes.states[i], f))
        seqs.append(z.reshape(len(z), -1))
        ids += [i] * len(z)
        steps += list(range(len(z)))
    res = dg.pca_project(seqs)
    path = out / "pca.csv"
    dg.write_pca_csv(path, res.coords, ids, steps)
    return [path]


def cmd_curvature(cfg, seed, out):
    env = _env(cfg)
    model = _checkpoint(cfg, seed)
    probes = _probe_trajectories(cfg, seed, env)
    f = model.config.frameskip
    crow, mrow = [], []
    for i in range(probes.n_traj):
        obs = dg.frameskipped_observations(env, probes.states[i], f)
        prof = dg.curvature_profile(model, obs, cfg.variant)
        crow += [(i, t, c) for t, c in enumerate(prof.cosines)]
        trace, frac = dg.mse_to_goal_trace(model, obs, obs[-1], "spatial")
        mrow += [(i, t, v, frac) for t, v in enumerate(trace)]
    cpath, mpath = out / "curvature.csv", out / "mse_to_goal.csv"
    _write_rows(cpath, ["traj_id", "t", "cosine"], crow)
    _write_rows(mpath, ["traj_id", "t", "mse", "decreasing_fraction"], mrow)
    return [cpath, mpath]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-plan": cmd_eval_plan,
    "mpc": cmd_mpc,
    "analyze-linear": cmd_analyze_linear,
    "sweep-theorem": cmd_sweep_theorem,
    "heatmap": cmd_heatmap,
    "pca": cmd_pca,
    "curvature": cmd_curvature,
}


def run(command, cfg: RunConfig) -> list:
    """Run ``command`` for every configured seed; returns the written paths."""
    written, rates = [], []
    for seed in cfg.seed_list:
        out = cfg.run_dir(seed)
        out.mkdir(parents=True, exist_ok=True)
        result = HANDLERS[command](cfg, seed, out)
        paths, rate = result if isinstance(result, tuple) else (result, None)
        write_manifest(out, cfg, seed, command, paths)
        written += paths
        if rate is not None:
            rates.append((seed, rate))
    if rates:
        written.append(_write_summary(cfg, command, rates))
    return written


def _write_summary(cfg: RunConfig, command, rates):
    """Success rate mean and std over seeds, one row per seed plus an aggregate row."""
    root = Path(cfg.runs_dir) / cfg.run_name
    mode = "open_loop" if command == "eval-plan" else "mpc"
    path = root / f"summary_{cfg.planner}_{mode}.csv"
    vals = np.array([r for _, r in rates])
    rows = [(cfg.env, cfg.planner, mode, s, r, "") for s, r in rates]
    rows.append((cfg.env, cfg.planner, mode, "all", vals.mean(), vals.std()))
    _write_rows(path, ["env", "planner", "mode", "seed", "success_mean", "success_std"], rows)
    return path


def build_parser():
    p = argparse.ArgumentParser(prog="straightwm", description="Temporally straightened latent world models.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("overrides", nargs="*", help="key=value overrides applied after the config file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides) if args.config else RunConfig.parse("", args.overrides)
        for path in run(args.command, cfg):
            print(path)
    except StraightWMError as exc:
        print(f"error:{exc.code}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
