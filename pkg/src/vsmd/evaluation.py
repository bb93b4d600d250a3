"""Sample-quality metrics and oracle checks."""
import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fastpath
from .errors import InvalidArgumentError
from .kernels import mat_exp
from .processes import VariationalSchedule, drift_blocks


# --------------------------------------------------------------------------
# PMF-RMSE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PmfGrid:
    lo: np.ndarray
    hi: np.ndarray
    bins: int = 50

    @classmethod
    def from_reference(cls, reference, bins=50, lower=0.5, upper=99.5, expand=0.10):
        """Box spanning the reference's ``lower``-``upper`` percentiles, widened by ``expand`` of its width."""
        reference = np.atleast_2d(reference)
        if reference.shape[0] == 0:
            raise InvalidArgumentError("reference sample set is empty")
        lo = np.percentile(reference, lower, axis=0)
        hi = np.percentile(reference, upper, axis=0)
        pad = 0.5 * expand * (hi - lo)
        return cls(lo - pad, hi + pad, int(bins))

    def pmf(self, samples):
        """Normalized histogram; points outside the box are clipped into the edge bins."""
        samples = np.atleast_2d(samples)
        if samples.shape[0] == 0:
            raise InvalidArgumentError("sample set is empty")
        width = (self.hi - self.lo) / self.bins
        idx = np.floor((samples - self.lo) / width).astype(np.int64)
        idx = np.clip(idx, 0, self.bins - 1)
        flat = np.ravel_multi_index(tuple(idx.T), (self.bins,) * samples.shape[1])
        counts = np.bincount(flat, minlength=self.bins ** samples.shape[1]).astype(np.float64)
        return counts / counts.sum()


def pmf_rmse(generated, reference, grid=None):
    generated = np.atleast_2d(generated)
    reference = np.atleast_2d(reference)
    if generated.shape[0] == 0 or reference.shape[0] == 0:
        raise InvalidArgumentError("pmf_rmse needs nonempty sample sets")
    if generated.shape[1] != reference.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {generated.shape[1]} vs {reference.shape[1]}")
    grid = PmfGrid.from_reference(reference) if grid is None else grid
    p, q = grid.pmf(generated), grid.pmf(reference)
    return float(np.sqrt(np.mean((p - q) ** 2)))


# --------------------------------------------------------------------------
# straightness
# --------------------------------------------------------------------------


def straightness(traj, axis=0):
    """Time-averaged squared deviation of the realized rate from the chord rate along ``axis``.

    ``S = mean_paths (1/T) sum_k dt_k (chord - dx_k/dt_k)^2``, ``chord = (x_end - x_start)/T``.
    """
    times = np.asarray(traj.times, dtype=np.float64)
    states = np.asarray(traj.states, dtype=np.float64)
    if times.shape[0] < 2 or states.shape[0] != times.shape[0]:
        raise InvalidArgumentError("straightness needs at least two saved nodes with matching times")
    x = states[:, :, axis]
    dt = np.abs(np.diff(times))
    if np.any(dt <= 0):
        raise InvalidArgumentError("trajectory times must be strictly monotone")
    T = dt.sum()
    chord = (x[-1] - x[0]) / T
    rate = np.diff(x, axis=0) / dt[:, None]
    per_path = np.sum(dt[:, None] * (chord[None, :] - rate) ** 2, axis=0) / T
    return float(per_path.mean())


# --------------------------------------------------------------------------
# CRPS
# --------------------------------------------------------------------------


def crps_ensemble(samples, obs):
    """Per-target CRPS of an ensemble ``(S, P)`` against ``(P,)`` observations."""
    samples = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if samples.ndim != 2 or obs.shape != samples.shape[1:]:
        raise InvalidArgumentError(f"expected samples (S, P) and obs (P,), got {samples.shape} and {obs.shape}")
    return fastpath.crps_ensemble(samples, obs)


def crps_sum(samples, observed):
    """CRPS of the dimension-summed series, averaged over the horizon, over mean |observed sum|."""
    samples = np.asarray(samples, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[..., None]
    if observed.ndim == 1:
        observed = observed[:, None]
    if samples.shape[0] < 1 or samples.shape[1:] != observed.shape:
        raise InvalidArgumentError(f"forecast {samples.shape} does not match observations {observed.shape}")
    s = samples.sum(axis=2)
    y = observed.sum(axis=1)
    norm = np.mean(np.abs(y))
    if norm == 0:
        raise InvalidArgumentError("observed sums are all zero; CRPS-Sum normalizer undefined")
    return float(np.mean(crps_ensemble(s, y)) / norm)


# --------------------------------------------------------------------------
# invariant measure of the time-invariant forward SDE
# --------------------------------------------------------------------------


def invariant_target(cfg, a_x, a_v):
    """Per-coordinate stationary variances ``(1/B1, 1/B2)``."""
    a_x = np.atleast_1d(np.asarray(a_x, dtype=np.float64))
    a_v = np.atleast_1d(np.asarray(a_v, dtype=np.float64))
    b2 = 1.0 - 2.0 * a_v
    b1 = (1.0 - 2.0 * cfg.gamma * a_x) * b2
    if np.any(b1 <= 0) or np.any(b2 <= 0):
        raise InvalidArgumentError("schedule is not feasible: B1, B2 must be positive")
    return 1.0 / b1, 1.0 / b2


def mixing_time(cfg, a_x, a_v, tol=1e-3):
    """Smallest doubling ``t`` with ``max ||exp(-beta/2 D t)||_2 < tol``."""
    sched = VariationalSchedule(np.atleast_2d(a_x), np.atleast_2d(a_v))
    D = drift_blocks(cfg, sched)[0]
    t = 0.25
    for _ in range(40):
        Phi = mat_exp(-0.5 * cfg.beta * t * D)
        if np.max(np.linalg.norm(Phi, 2, axis=(1, 2))) < tol:
            return t
        t *= 2.0
    raise InvalidArgumentError("forward process does not contract; check feasibility")


@dataclass
class InvariantReport:
    target_xx: np.ndarray
    target_vv: np.ndarray
    emp_cov: np.ndarray  # (d, 2, 2)
    t_long: float
    h: float
    max_rel_error: float
    max_abs_corr: float


def invariant_measure_check(cfg, a_x, a_v, n=100_000, t_long=None, seed=0, h=None):
    """Simulate the forward SDE with constant ``(a_x, a_v)`` from ``a = 0`` and compare the
    empirical covariance with ``diag(1/B1, 1/B2)``.

    ``max_rel_error`` is over the diagonal entries; ``max_abs_corr`` is the largest
    empirical x-v correlation (target zero).
    """
    a_x = np.atleast_1d(np.asarray(a_x, dtype=np.float64))
    a_v = np.atleast_1d(np.asarray(a_v, dtype=np.float64))
    txx, tvv = invariant_target(cfg, a_x, a_v)
    if t_long is None:
        t_long = mixing_time(cfg, a_x[None], a_v[None])
    kx = 1.0 - 2.0 * cfg.gamma * a_x
    cv = cfg.gamma * (1.0 - 2.0 * a_v)
    if h is None:
        rate = 0.5 * cfg.beta * max(np.max(cv), np.max(np.sqrt(kx)))
        # EM covariance bias is O(rate*h), about 1% here
        h = 2e-2 / rate
    nsteps = int(np.ceil(t_long / h))
    d = a_x.shape[0]
    x = np.zeros((n, d))
    v = np.zeros((n, d))
    x, v = fastpath.forward_em(x, v, kx, cv, float(cfg.beta), float(cfg.gamma), float(h), nsteps, int(seed))
    emp = np.empty((d, 2, 2))
    emp[:, 0, 0] = np.mean(x * x, axis=0)
    emp[:, 1, 1] = np.mean(v * v, axis=0)
    emp[:, 0, 1] = emp[:, 1, 0] = np.mean(x * v, axis=0)
    rel = np.concatenate([np.abs(emp[:, 0, 0] / txx - 1), np.abs(emp[:, 1, 1] / tvv - 1)])
    corr = np.abs(emp[:, 0, 1]) / np.sqrt(emp[:, 0, 0] * emp[:, 1, 1])
    return InvariantReport(txx, tvv, emp, float(t_long), float(h), float(rel.max()), float(corr.max()))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

METRIC_COLUMNS = ("metric", "value", "n_samples", "seed", "config_hash", "wall_time")


@dataclass
class MetricsReport:
    metric: str
    value: float
    n_samples: int
    seed: int
    config_hash: str
    wall_time: float
    extra: dict = field(default_factory=dict)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def append_metrics_csv(path, reports):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow([r.metric, f"{r.value:.17g}", r.n_samples, r.seed, r.config_hash, f"{r.wall_time:.17g}"])


def write_summary_json(path, reports, config_hash):
    blob = {"config_hash": config_hash, "metrics": {r.metric: asdict(r) for r in reports}}
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, default=float)
