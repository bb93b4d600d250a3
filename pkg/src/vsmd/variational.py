"""Stochastic approximation of the variational scores ``A_x`` through the Feynman-Kac loss.

Per backward sample at node ``n`` (``beta = beta_n``):

    zbar = sqrt(beta*gamma) * (a_x x + a_v v)
    zvec = sqrt(beta*gamma) * s_v
    l(A) = 1/2 |zbar|^2 + beta*sqrt(gamma) * tr(A_v) + zeta * zbar . zvec

Only ``a_x`` is descended; ``a_v`` follows through the damping transform.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidArgumentError
from .processes import damping_transform

ESTIMATORS = ("feynman_kac", "control_cost")


@dataclass
class SAState:
    """Robbins-Monro schedule ``eta_k = eta0 * decay^(k-1) / k^alpha``."""

    eta0: float = 1e-3
    alpha: float = 0.75
    decay: float = 1.0
    stage: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.eta0 >= 0 or not np.isfinite(self.eta0):
            raise ConfigError(f"eta0 must be finite and >= 0 (got {self.eta0})")
        if not 0.5 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (1/2, 1] (got {self.alpha})")
        if not 0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1] (got {self.decay})")
        return self

    def to_dict(self):
        return {"eta0": self.eta0, "alpha": self.alpha, "decay": self.decay, "stage": self.stage, "frozen": self.frozen}


def step_size(sa, k):
    if k < 1:
        raise InvalidArgumentError(f"stage index must be >= 1 (got {k})")
    return sa.eta0 * sa.decay ** (k - 1) / float(k) ** sa.alpha


@dataclass
class FKLossConfig:
    zeta: float = 1.0
    estimator: str = "feynman_kac"
    samples_per_stage: int = 2048
    nodes_per_stage: int = 0  # 0 means every node 1..N-1
    sign: float = 1.0  # -1 ascends the per-sample loss instead

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not np.isfinite(self.zeta):
            raise ConfigError(f"zeta must be finite (got {self.zeta})")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS} (got {self.estimator!r})")
        if self.samples_per_stage < 1:
            raise ConfigError("samples_per_stage must be >= 1")
        if self.nodes_per_stage < 0:
            raise ConfigError("nodes_per_stage must be >= 0")
        if self.sign not in (1.0, -1.0):
            raise ConfigError(f"sign must be +1 or -1 (got {self.sign})")
        return self


def _coupling(flc):
    return flc.zeta if flc.estimator == "feynman_kac" else 0.0


def _node_terms(sched, cfg, node, states, score_v):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise InvalidArgumentError("fk loss needs at least one backward sample")
    d = sched.dim
    if states.shape[1] != 2 * d:
        raise InvalidArgumentError(f"states have {states.shape[1]} columns, expected {2 * d}")
    score_v = np.asarray(score_v, dtype=np.float64).reshape(states.shape[0], d)
    beta = float(cfg.beta_table()[node])
    return states[:, :d], states[:, d:], score_v, beta, np.sqrt(beta * cfg.gamma)


def fk_loss(sched, cfg, node, states, score_v, flc, a_x=None):
    """Per-sample loss at ``node`` (A_v held at the schedule's value); ``a_x`` overrides the schedule row."""
    x, v, s, beta, c = _node_terms(sched, cfg, node, states, score_v)
    ax = sched.a_x[node] if a_x is None else np.asarray(a_x, dtype=np.float64)
    av = sched.a_v[node]
    zbar = c * (ax * x + av * v)
    zvec = c * s
    loss = 0.5 * np.sum(zbar**2, axis=1) + _coupling(flc) * np.sum(zbar * zvec, axis=1)
    if flc.estimator == "feynman_kac":
        loss = loss + beta * np.sqrt(cfg.gamma) * np.sum(av)
    return flc.sign * loss


def fk_loss_grad(sched, cfg, node, states, score_v, flc):
    """Batch-mean gradient of ``fk_loss`` with respect to ``a_x[node]``, shape ``(d,)``."""
    x, v, s, beta, c = _node_terms(sched, cfg, node, states, score_v)
    bg = c * c
    ax, av = sched.a_x[node], sched.a_v[node]
    g = bg * np.mean((ax * x + av * v) * x, axis=0) + _coupling(flc) * bg * np.mean(s * x, axis=0)
    return flc.sign * g


def project_feasible(cfg, a_x):
    """Clip so that ``1 - 2*gamma*a_x >= eps``."""
    return np.minimum(a_x, (1.0 - cfg.eps_feasible) / (2.0 * cfg.gamma))


def select_nodes(cfg, flc, rng=None):
    nodes = np.arange(1, cfg.grid_size)
    if flc.nodes_per_stage and flc.nodes_per_stage < nodes.size:
        if rng is None:
            raise InvalidArgumentError("node subsampling needs an rng")
        nodes = np.sort(rng.choice(nodes, size=flc.nodes_per_stage, replace=False))
    return nodes


@dataclass
class StageRecord:
    stage: int
    eta: float
    grad_norm: float
    rows: list = field(default_factory=list)  # (node, mean a_x, mean a_v)


def sa_step(sa, sched, cfg, traj, score_fn, flc, rng=None):
    """One SA stage on fresh backward trajectories; returns ``(new_sched, StageRecord)``.

    ``traj`` must hold states at every grid node (``keep_path=True``).  The
    gradient at node ``n`` uses the states the backward pass visited at ``t_n``.
    """
    N = cfg.grid_size
    if traj.states.shape[0] != N:
        raise InvalidArgumentError(f"trajectory holds {traj.states.shape[0]} nodes, SA needs all {N}")
    d = sched.dim
    new = sched.copy()
    k = sa.stage + 1
    eta = step_size(sa, k)
    sq = 0.0
    for n in select_nodes(cfg, flc, rng):
        states = traj.states[N - 1 - n]
        s_v = score_fn(states, cfg.times()[n])[:, d:]
        g = fk_loss_grad(sched, cfg, n, states, s_v, flc)
        sq += float(np.sum(g * g))
        new.a_x[n] = sched.a_x[n] - eta * g
    new.a_x = project_feasible(cfg, new.a_x)
    new.a_x[0] = new.a_x[1]
    new.a_v = np.asarray(damping_transform(cfg, new.a_x), dtype=np.float64).reshape(new.a_x.shape)
    new.check_feasible(cfg)
    sa.stage = k
    rec = StageRecord(stage=k, eta=eta, grad_norm=np.sqrt(sq))
    rec.rows = [(i, float(new.a_x[i].mean()), float(new.a_v[i].mean())) for i in range(N)]
    return new, rec


def append_stage_log(path, rec, write_header=False):
    """Append ``stage, node, mean_a_x, mean_a_v, eta`` rows (17 significant digits)."""
    with open(path, "a") as fh:
        if write_header:
            fh.write("stage,node,mean_a_x,mean_a_v,eta\n")
        for node, ax, av in rec.rows:
            fh.write(f"{rec.stage},{node},{ax:.17g},{av:.17g},{rec.eta:.17g}\n")
