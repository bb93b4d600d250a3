"""Run orchestration: datasets, the alternating score/SA training loop, sampling and forecasting."""
import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import samplers
from .data import (
    ContextEncoder,
    Standardizer,
    gen_series,
    gen_toy_with_meta,
    windows,
)
from .errors import CheckpointError, InvalidArgumentError, NumericalError
from .processes import build_kernel, initial_schedule
from .scorenet import (
    Adam,
    ScoreNetwork,
    TrainState,
    dsm_loss,
    load_checkpoint,
    sample_training_batch,
    save_checkpoint,
    train_step,
    update_ema,
)
from .variational import StageRecord, append_stage_log, sa_step

LOSS_COLUMNS = ("step", "stage", "loss")


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def make_dataset(rc):
    """Training points ``(n, d)`` for the generative tasks plus a metadata dict."""
    if rc.run.task == "toy":
        return gen_toy_with_meta(rc.data)
    if rc.run.task == "gaussian":
        rng = np.random.default_rng(rc.data.seed)
        var = np.asarray(rc.gaussian.variances, dtype=np.float64)
        pts = rng.standard_normal((rc.gaussian.n_points, var.size)) * np.sqrt(var)
        return pts, {"variances": var.tolist()}
    raise InvalidArgumentError(f"task {rc.run.task!r} has no point dataset; use the series helpers")


def input_scale(kernel, data_var):
    """Per-coordinate ``1/sqrt`` of the node-averaged marginal variance of ``(x, v)``."""
    dv = np.asarray(data_var, dtype=np.float64)
    Phi, Sig = kernel.Phi[1:], kernel.Sigma[1:]
    var_x = Phi[..., 0, 0] ** 2 * dv + Sig[..., 0, 0]
    var_v = Phi[..., 1, 0] ** 2 * dv + Sig[..., 1, 1]
    return 1.0 / np.sqrt(np.concatenate([var_x.mean(axis=0), var_v.mean(axis=0)]))


# --------------------------------------------------------------------------
# logs
# --------------------------------------------------------------------------


class LossLog:
    """Append-only ``step,stage,loss`` CSV; resuming truncates rows past the checkpoint."""

    def __init__(self, path, resume_step=None):
        self.path = Path(path)
        if resume_step is None or not self.path.exists():
            with open(self.path, "w") as fh:
                fh.write(",".join(LOSS_COLUMNS) + "\n")
        else:
            _truncate_csv(self.path, 0, resume_step)
        self._fh = open(self.path, "a")

    def write(self, step, stage, loss):
        self._fh.write(f"{step},{stage},{loss:.17g}\n")

    def close(self):
        self._fh.close()


def _truncate_csv(path, column, last):
    """Drop data rows whose integer ``column`` exceeds ``last``; the header is kept."""
    with open(path) as fh:
        rows = list(csv.reader(fh))
    with open(path, "w") as fh:
        for r in rows[:1] + [r for r in rows[1:] if r and int(r[column]) <= last]:
            fh.write(",".join(r) + "\n")


def _sched_record(sched, stage, eta):
    rec = StageRecord(stage=stage, eta=eta, grad_norm=0.0)
    rec.rows = [(i, float(sched.a_x[i].mean()), float(sched.a_v[i].mean())) for i in range(sched.grid_size)]
    return rec


# --------------------------------------------------------------------------
# generative training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: ScoreNetwork
    state: TrainState
    sched: object
    losses: list = field(default_factory=list)  # (step, loss) for steps run in this call
    stage_records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _backward_for_sa(rc, cfg, sched, kernel, score_fn, n, rng):
    fn = samplers.backward_aboba if rc.sa.sampler == "aboba" else samplers.backward_em
    return fn(score_fn, cfg, sched, kernel, n, rng, keep_path=True)


def _new_network(rc, cfg, kernel, data_var, cond_dim=0):
    d = len(data_var)
    sn = rc.scorenet
    return ScoreNetwork(
        d, hidden=sn.hidden, horizon=cfg.horizon, n_time_features=sn.n_time_features, cond_dim=cond_dim,
        ema_beta=sn.ema_beta, in_scale=input_scale(kernel, data_var), seed=rc.run.seed,
    )


def train_generative(rc, data, out_dir=None, resume=None, stages=None, log_every=1):
    """Alternate ``steps_per_stage`` score updates with one SA stage, ``stages`` times.

    Non-variational modes skip SA, so their schedule stays identically zero.  With
    ``out_dir`` a checkpoint is written after every stage along with ``loss.csv``
    and ``sa_stages.csv``.  ``resume`` continues from a checkpoint written by this
    function; the random stream, optimizer moments, EMA and SA counter all come
    from it, so the continuation reproduces an uninterrupted run bit for bit.
    """
    cfg = rc.diffusion_config()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidArgumentError("training data must be a nonempty (n, d) array")
    d = data.shape[1]
    chash = rc.model_hash()
    sa = rc.sa_state()
    flc = rc.fk_config()
    sn = rc.scorenet
    stages = sn.stages if stages is None else stages
    rng = np.random.default_rng(rc.run.seed)

    start = 0
    if resume is not None:
        net, state, sched, meta = load_checkpoint(resume, expected_hash=chash)
        if sched is None or "rng_state" not in meta:
            raise CheckpointError(f"{resume} is not a training checkpoint")
        rng.bit_generator.state = meta["rng_state"]
        start = int(meta["extra"]["stage"])
        sa.stage = int(meta["extra"]["sa_stage"])
        kernel = build_kernel(cfg, sched)
    else:
        sched = initial_schedule(cfg, d)
        kernel = build_kernel(cfg, sched)
        net = _new_network(rc, cfg, kernel, data.var(axis=0))
        state = TrainState(score_lr=sn.score_lr, variational_lr=rc.sa.eta0, batch_size=sn.batch_size,
                           weighting=sn.weighting)

    out = None
    loss_log = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        loss_log = LossLog(out / "loss.csv", resume_step=state.step if resume is not None else None)
        stage_log = out / "sa_stages.csv"
        if resume is None or not stage_log.exists():
            stage_log.unlink(missing_ok=True)
            append_stage_log(stage_log, _sched_record(sched, start, 0.0), write_header=True)
        else:
            _truncate_csv(stage_log, 0, start)

    result = TrainResult(net, state, sched)
    try:
        for stage in range(start, stages):
            for _ in range(sn.steps_per_stage):
                loss = train_step(state, net, kernel, data, rng)
                result.losses.append((state.step, loss))
                if loss_log is not None and state.step % log_every == 0:
                    loss_log.write(state.step, stage + 1, loss)
            if cfg.mode.variational:
                score_fn = net.score_fn(use_ema=True)
                traj = _backward_for_sa(rc, cfg, sched, kernel, score_fn, flc.samples_per_stage, rng)
                sched, rec = sa_step(sa, sched, cfg, traj, score_fn, flc, rng)
                kernel = build_kernel(cfg, sched)
            else:
                rec = _sched_record(sched, stage + 1, 0.0)
            result.stage_records.append(rec)
            result.sched = sched
            if out is not None:
                append_stage_log(stage_log, rec)
                path = out / "checkpoints" / f"stage_{stage + 1:04d}.npz"
                save_checkpoint(path, net, state, sched, chash, rng=rng,
                                extra={"stage": stage + 1, "sa_stage": sa.stage, "task": rc.run.task,
                                       "data_var": data.var(axis=0).tolist()})
                _link_latest(path)
                result.checkpoints.append(path)
    finally:
        if loss_log is not None:
            loss_log.close()
    return result


def _link_latest(path):
    latest = path.parent / "latest.npz"
    tmp = path.parent / ".latest.tmp.npz"
    with open(path, "rb") as src, open(tmp, "wb") as dst:
        dst.write(src.read())
    os.replace(tmp, latest)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def generate(rc, net, sched, n, sampler=None, seed=None, keep_path=False, prior_samples=None):
    """Draw ``n`` samples with the EMA score; returns a ``Trajectory``."""
    cfg = rc.diffusion_config()
    kernel = build_kernel(cfg, sched)
    rng = np.random.default_rng(rc.run.seed if seed is None else seed)
    name = sampler or rc.sample.sampler
    return samplers.run_sampler(name, net.score_fn(use_ema=True), cfg, sched, kernel, n, rng,
                                keep_path=keep_path, prior_samples=prior_samples)


# --------------------------------------------------------------------------
# forecasting
# --------------------------------------------------------------------------


@dataclass
class Forecaster:
    net: ScoreNetwork
    encoder: ContextEncoder
    sched: object
    scaler: Standardizer
    context: int
    state: TrainState = None
    stage_records: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def split_series(rc, series=None):
    """``(series, train_end)``: the training prefix is ``series[:train_end]``."""
    series = gen_series(rc.series) if series is None else np.asarray(series, dtype=np.float64)
    train_end = int(rc.forecast.train_fraction * series.shape[0])
    if train_end <= rc.series.context + 1:
        raise InvalidArgumentError("training prefix shorter than the context window")
    return series, train_end


def _encoder_ema(enc, step, beta):
    decay = min(beta, (1.0 + step) / (10.0 + step))
    for e, p in zip(enc.ema, enc.params):
        e *= decay
        e += (1.0 - decay) * p


def train_forecaster(rc, series, train_end, out_dir=None):
    """Jointly train the context encoder and the conditional score net on one-step targets.

    Variational modes interleave SA stages whose backward trajectories are
    conditioned on randomly drawn training windows.
    """
    cfg = rc.diffusion_config()
    fc, sn = rc.forecast, rc.scorenet
    C = rc.series.context
    rng = np.random.default_rng(rc.run.seed)
    scaler = Standardizer.fit(series[:train_end])
    z = scaler.transform(series[:train_end])
    win, tgt = windows(z, C)
    d = tgt.shape[1]
    sched = initial_schedule(cfg, d)
    kernel = build_kernel(cfg, sched)
    enc = ContextEncoder(C, d, hidden=fc.encoder_hidden, out_dim=fc.encoder_out, seed=rc.run.seed + 1)
    # one-step targets given the context are far tighter than the marginal, so scale by it
    net = _new_network(rc, cfg, kernel, tgt.var(axis=0), cond_dim=fc.encoder_out)
    state = TrainState(score_lr=sn.score_lr, variational_lr=rc.sa.eta0, batch_size=sn.batch_size,
                       weighting=sn.weighting)
    opt = state.ensure_optimizer(net)
    enc_opt = Adam([p.shape for p in enc.params], lr=sn.score_lr)
    sa, flc = rc.sa_state(), rc.fk_config()
    model = Forecaster(net, enc, sched, scaler, C, state)
    for _ in range(sn.stages):
        for _ in range(sn.steps_per_stage):
            a0, node, eps, idx = sample_training_batch(kernel, tgt, rng, state.batch_size)
            h, cache = enc.forward(win[idx], keep=True)
            loss, grads, g_cond = dsm_loss(net, kernel, a0, node, eps, cond=h, weighting=state.weighting)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite forecaster loss at step {state.step}")
            opt.update(net.params, grads)
            enc_opt.update(enc.params, enc.backward(cache, g_cond))
            state.step += 1
            update_ema(net, state.step)
            _encoder_ema(enc, state.step, sn.ema_beta)
            model.losses.append((state.step, loss))
        if cfg.mode.variational:
            pick = rng.integers(0, win.shape[0], flc.samples_per_stage)
            cond = enc.forward(win[pick], params=enc.ema)
            score_fn = net.score_fn(use_ema=True, cond=cond)
            traj = _backward_for_sa(rc, cfg, sched, kernel, score_fn, flc.samples_per_stage, rng)
            sched, rec = sa_step(sa, sched, cfg, traj, score_fn, flc, rng)
            kernel = build_kernel(cfg, sched)
            model.stage_records.append(rec)
    model.sched = sched
    if out_dir is not None:
        save_forecaster(Path(out_dir) / "forecaster.npz", model, rc.model_hash())
    return model


def save_forecaster(path, model, chash):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"enc_param_{i}": p for i, p in enumerate(model.encoder.params)}
    arrays.update({f"enc_ema_{i}": p for i, p in enumerate(model.encoder.ema)})
    arrays["scaler_mean"], arrays["scaler_std"] = model.scaler.mean, model.scaler.std
    extra = {"task": "series", "encoder": model.encoder.arch()}
    save_checkpoint(path, model.net, model.state, model.sched, chash, extra=extra, arrays=arrays)


def load_forecaster(path, expected_hash=None):
    net, state, sched, meta = load_checkpoint(path, expected_hash=expected_hash)
    arch = meta["extra"].get("encoder")
    if arch is None or not net.cond_dim:
        raise CheckpointError(f"{path} is not a conditional forecaster checkpoint")
    enc = ContextEncoder(arch["context"], arch["dims"], hidden=arch["hidden"], out_dim=arch["out_dim"])
    arr = meta["arrays"]
    enc.params = [arr[f"enc_param_{i}"] for i in range(4)]
    enc.ema = [arr[f"enc_ema_{i}"] for i in range(4)]
    scaler = Standardizer(arr["scaler_mean"], arr["scaler_std"])
    return Forecaster(net, enc, sched, scaler, arch["context"], state)


def rollout(rc, model, context_window, horizon, n_paths, sampler="pf_heun", seed=0):
    """Autoregressive sample paths ``(S, P, dims)`` in original units.

    Each step encodes the current (partly sampled) window, draws the next value
    from the conditional model starting at the terminal prior (velocity
    included) and appends it.
    """
    cfg = rc.diffusion_config()
    kernel = build_kernel(cfg, model.sched)
    rng = np.random.default_rng(seed)
    win = model.scaler.transform(np.asarray(context_window, dtype=np.float64))
    if win.shape != (model.context, model.encoder.dims):
        raise InvalidArgumentError(f"context window must be ({model.context}, {model.encoder.dims}), got {win.shape}")
    buf = np.broadcast_to(win, (n_paths, *win.shape)).copy()
    out = np.empty((n_paths, horizon, win.shape[1]))
    for p in range(horizon):
        cond = model.encoder.forward(buf, params=model.encoder.ema)
        score_fn = model.net.score_fn(use_ema=True, cond=cond)
        traj = samplers.run_sampler(sampler, score_fn, cfg, model.sched, kernel, n_paths, rng)
        y = traj.final[:, : win.shape[1]]
        out[:, p] = y
        buf = np.concatenate([buf[:, 1:], y[:, None, :]], axis=1)
    return model.scaler.inverse(out)


def climatology(series_train, horizon, n_paths, seed=0):
    """Baseline paths: independent draws of whole training rows at every horizon step."""
    rng = np.random.default_rng(seed)
    series_train = np.asarray(series_train, dtype=np.float64)
    idx = rng.integers(0, series_train.shape[0], (n_paths, horizon))
    return series_train[idx]


def forecast_origins(rc, series, train_end):
    """Evenly spaced forecast origins in the held-out tail (index of the first target)."""
    P, C = rc.series.horizon, rc.series.context
    first, last = max(train_end, C), series.shape[0] - P
    if last < first:
        raise InvalidArgumentError(
            f"horizon {P} exceeds the held-out tail ({series.shape[0] - train_end} points)"
        )
    k = rc.forecast.n_origins
    return np.unique(np.linspace(first, last, k).round().astype(int))
