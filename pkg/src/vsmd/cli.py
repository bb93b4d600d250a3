"""Command-line entry point: ``vsmd {gen-data,train,sample,eval,forecast,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence, 4 I/O error.
"""
import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import plots
from .config import RunConfig, write_run_manifest
from .data import gen_series, read_points_csv, write_points_csv
from .errors import CheckpointError, ConfigError, InvalidArgumentError, NumericalError
from .evaluation import (
    MetricsReport,
    PmfGrid,
    Timer,
    append_metrics_csv,
    crps_sum,
    pmf_rmse,
    straightness,
    write_summary_json,
)
from .samplers import load_trajectory, save_trajectory, write_trajectory_csv
from .scorenet import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("vsmd")


def _config(args):
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out_dir={args.out}")
    return RunConfig.load(args.config, overrides)


def _out(rc):
    out = Path(rc.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, rc)
    return out


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_points(path):
    pts, header = read_points_csv(path)
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    return pts[:, cols] if cols else pts


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(rc, args):
    out = _out(rc)
    if rc.run.task == "series":
        series = gen_series(rc.series)
        cols = ["t"] + [f"y{j}" for j in range(series.shape[1])]
        write_points_csv(out / "series.csv", np.column_stack([np.arange(series.shape[0]), series]), cols)
        log.info("wrote %s", out / "series.csv")
        return
    pts, meta = ex.make_dataset(rc)
    write_points_csv(out / "train.csv", pts)
    ref_rc = RunConfig.load(args.config, list(args.override or []) + [
        f"data.seed={rc.data.seed + 1}", f"data.n_points={rc.eval.n_reference}",
        f"gaussian.n_points={rc.eval.n_reference}"])
    ref, _ = ex.make_dataset(ref_rc)
    write_points_csv(out / "reference.csv", ref)
    (out / "data_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    log.info("wrote %s and %s", out / "train.csv", out / "reference.csv")


def _training_points(rc, args):
    if args.data:
        return _load_points(_require(args.data, "data"))
    return ex.make_dataset(rc)[0]


def cmd_train(rc, args):
    out = _out(rc)
    if rc.run.task == "series":
        series = None
        if args.data:
            arr, header = read_points_csv(_require(args.data, "data"))
            series = arr[:, [i for i, h in enumerate(header) if h.startswith("y")]]
        series, train_end = ex.split_series(rc, series)
        model = ex.train_forecaster(rc, series, train_end, out_dir=out)
        _write_losses(out / "loss.csv", model.losses)
        log.info("forecaster trained for %d steps", model.state.step)
        return
    data = _training_points(rc, args)
    res = ex.train_generative(rc, data, out_dir=out, resume=args.resume)
    final = res.sched
    plots.curves_svg(out / "schedule.svg", np.arange(final.grid_size),
                     {f"a_x[{j}]": final.a_x[:, j] for j in range(final.dim)},
                     xlabel="node", ylabel="a_x", title="variational schedule")
    log.info("trained to step %d; last checkpoint %s", res.state.step,
             res.checkpoints[-1] if res.checkpoints else "none")


def _write_losses(path, losses):
    with open(path, "w") as fh:
        fh.write("step,stage,loss\n")
        for step, loss in losses:
            fh.write(f"{step},,{loss:.17g}\n")


def _checkpoint(rc, args):
    path = _require(args.checkpoint, "checkpoint")
    return load_checkpoint(path, expected_hash=rc.model_hash())


def cmd_sample(rc, args):
    out = _out(rc)
    net, _, sched, _ = _checkpoint(rc, args)
    name = args.sampler or rc.sample.sampler
    n = args.n or rc.sample.n_samples
    traj = ex.generate(rc, net, sched, n, name)
    d = traj.dim
    write_points_csv(out / "samples.csv", traj.final[:, :d])
    if args.trajectory or rc.sample.keep_path:
        paths = ex.generate(rc, net, sched, min(n, rc.sample.path_samples), name, keep_path=True)
        write_trajectory_csv(out / "trajectory.csv", paths)
        save_trajectory(out / "trajectory.npz", paths)
    log.info("wrote %d %s samples to %s", n, name, out / "samples.csv")


def cmd_eval(rc, args):
    out = _out(rc)
    gen = _load_points(_require(args.samples, "samples"))
    ref = _load_points(_require(args.reference, "reference"))
    if gen.shape[1] != ref.shape[1]:
        raise InvalidArgumentError(f"samples have {gen.shape[1]} columns, reference has {ref.shape[1]}")
    h = rc.model_hash()
    reports = []
    traj = load_trajectory(_require(args.trajectory, "trajectory")) if args.trajectory else None
    for metric in rc.eval.metrics:
        with Timer() as tm:
            if metric == "pmf_rmse":
                value = pmf_rmse(gen, ref, PmfGrid.from_reference(ref, bins=rc.eval.bins))
                n = gen.shape[0]
            elif metric.startswith("straightness"):
                if traj is None:
                    raise ConfigError(f"metric {metric} needs --trajectory")
                axis = {"straightness": rc.eval.axis, "straightness_x": 0, "straightness_y": 1}.get(metric)
                if axis is None:
                    raise ConfigError(f"unknown metric {metric!r}")
                value = straightness(traj, axis=axis)
                n = traj.states.shape[1]
            else:
                raise ConfigError(f"unknown metric {metric!r}")
        reports.append(MetricsReport(metric, value, n, rc.run.seed, h, tm.elapsed))
    append_metrics_csv(out / "results.csv", reports)
    write_summary_json(out / "summary.json", reports, h)
    plots.scatter_svg(out / "scatter.svg", gen, ref, title=rc.diffusion.preset or rc.diffusion.mode)
    if args.run:
        _stage_curve(rc, Path(args.run), ref, out)
    for r in reports:
        log.info("%s = %.6g", r.metric, r.value)


def _stage_curve(rc, run_dir, ref, out):
    """PMF-RMSE of every stage checkpoint in ``run_dir``."""
    ckpts = sorted((run_dir / "checkpoints").glob("stage_*.npz"))
    if not ckpts:
        raise FileNotFoundError(f"no stage checkpoints under {run_dir}")
    grid = PmfGrid.from_reference(ref, bins=rc.eval.bins)
    stages, values = [], []
    for path in ckpts:
        net, _, sched, meta = load_checkpoint(path, expected_hash=rc.model_hash())
        traj = ex.generate(rc, net, sched, rc.sample.n_samples)
        stages.append(meta["extra"]["stage"])
        values.append(pmf_rmse(traj.final[:, :ref.shape[1]], ref, grid))
    with open(out / "stage_metrics.csv", "w") as fh:
        fh.write("stage,pmf_rmse\n")
        for s, v in zip(stages, values):
            fh.write(f"{s},{v:.17g}\n")
    plots.curves_svg(out / "stages.svg", stages, {"pmf_rmse": values}, ylabel="PMF-RMSE")


def cmd_forecast(rc, args):
    if rc.run.task != "series":
        raise ConfigError("forecast needs run.task=series")
    out = _out(rc)
    model = ex.load_forecaster(_require(args.checkpoint, "checkpoint"), expected_hash=rc.model_hash())
    series = None
    if args.data:
        arr, header = read_points_csv(_require(args.data, "data"))
        series = arr[:, [i for i, hd in enumerate(header) if hd.startswith("y")]]
    series, train_end = ex.split_series(rc, series)
    P, C, S = rc.series.horizon, rc.series.context, rc.forecast.n_paths
    sampler = args.sampler or rc.forecast.sampler
    h = rc.model_hash()
    model_scores, clim_scores = [], []
    with Timer() as tm, open(out / "forecast_paths.csv", "w") as fh:
        fh.write("origin,path,step," + ",".join(f"y{j}" for j in range(series.shape[1])) + "\n")
        for k, origin in enumerate(ex.forecast_origins(rc, series, train_end)):
            obs = series[origin:origin + P]
            paths = ex.rollout(rc, model, series[origin - C:origin], P, S, sampler, seed=rc.run.seed + k)
            clim = ex.climatology(series[:train_end], P, S, seed=rc.run.seed + k)
            model_scores.append(crps_sum(paths, obs))
            clim_scores.append(crps_sum(clim, obs))
            for s in range(S):
                for p in range(P):
                    fh.write(f"{origin},{s},{p}," + ",".join(f"{v:.17g}" for v in paths[s, p]) + "\n")
            if k == 0:
                plots.forecast_svg(out / "forecast.svg", series[origin - C:origin], paths, obs)
    reports = [
        MetricsReport(f"crps_sum_{sampler}", float(np.mean(model_scores)), S, rc.run.seed, h, tm.elapsed),
        MetricsReport("crps_sum_climatology", float(np.mean(clim_scores)), S, rc.run.seed, h, 0.0),
    ]
    append_metrics_csv(out / "results.csv", reports)
    write_summary_json(out / "summary.json", reports, h)
    for r in reports:
        log.info("%s = %.6g", r.metric, r.value)


def cmd_sweep(rc, args):
    """Train, sample and evaluate every point of the cartesian grid given by ``--vary``."""
    if not args.vary:
        raise ConfigError("sweep needs at least one --vary section.key=v1|v2|...")
    if rc.run.task == "series":
        raise ConfigError("sweep drives generative tasks; run forecast configs individually")
    axes = []
    for spec in args.vary:
        key, sep, vals = spec.partition("=")
        if not sep or not vals:
            raise ConfigError(f"--vary {spec!r} must look like section.key=v1|v2")
        axes.append([f"{key.strip()}={v}" for v in vals.split("|")])
    root = Path(rc.run.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    base = list(args.override or [])
    if args.seed is not None:
        base.append(f"run.seed={args.seed}")
    rows = []
    for i, combo in enumerate(itertools.product(*axes)):
        sub = root / f"point_{i:03d}"
        prc = RunConfig.load(args.config, base + list(combo) + [f"run.out_dir={sub}"])
        write_run_manifest(sub, prc)
        data, _ = ex.make_dataset(prc)
        ref_rc = RunConfig.load(args.config, base + list(combo) + [
            f"data.seed={prc.data.seed + 1}", f"data.n_points={prc.eval.n_reference}",
            f"gaussian.n_points={prc.eval.n_reference}"])
        ref, _ = ex.make_dataset(ref_rc)
        res = ex.train_generative(prc, data, out_dir=sub)
        traj = ex.generate(prc, res.net, res.sched, prc.sample.n_samples)
        write_points_csv(sub / "samples.csv", traj.final[:, :traj.dim])
        value = pmf_rmse(traj.final[:, :traj.dim], ref, PmfGrid.from_reference(ref, bins=prc.eval.bins))
        rows.append((i, ";".join(combo), prc.model_hash(), value))
        log.info("point %d [%s] pmf_rmse=%.6g", i, " ".join(combo), value)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "overrides", "config_hash", "pmf_rmse"])
        for i, combo, h, v in rows:
            w.writerow([i, combo, h, f"{v:.17g}"])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "forecast": cmd_forecast,
    "sweep": cmd_sweep,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", metavar="DIR", help="run directory (overrides run.out_dir)")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="section.key=value, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vsmd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write dataset CSVs")
    t = sub.add_parser("train", parents=[common], help="alternating score/SA training")
    t.add_argument("--data", metavar="CSV", help="training points (default: generate from config)")
    t.add_argument("--resume", metavar="NPZ", help="continue from a stage checkpoint")
    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", metavar="NPZ")
    s.add_argument("--sampler", choices=["em", "aboba", "pf_euler", "pf_heun"])
    s.add_argument("--n", type=int)
    s.add_argument("--trajectory", action="store_true", help="also dump full paths")
    e = sub.add_parser("eval", parents=[common], help="metrics and SVG plots")
    e.add_argument("--samples", metavar="CSV")
    e.add_argument("--reference", metavar="CSV")
    e.add_argument("--trajectory", metavar="NPZ")
    e.add_argument("--run", metavar="DIR", help="training run for the per-stage curve")
    f = sub.add_parser("forecast", parents=[common], help="autoregressive probabilistic forecast")
    f.add_argument("--checkpoint", metavar="NPZ")
    f.add_argument("--data", metavar="CSV", help="series CSV (default: generate from config)")
    f.add_argument("--sampler", choices=["em", "aboba", "pf_euler", "pf_heun"])
    w = sub.add_parser("sweep", parents=[common], help="cartesian sweep over overrides")
    w.add_argument("--vary", action="append", metavar="KEY=V1|V2", help="one sweep axis, repeatable")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        rc = _config(args)
        COMMANDS[args.command](rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
