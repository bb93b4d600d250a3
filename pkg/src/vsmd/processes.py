"""Linear momentum diffusions: configuration, drift assembly and the closed-form kernel.

Augmented states are float arrays of shape ``(..., 2d)`` holding ``x`` in the
first ``d`` columns and ``v`` in the last ``d``.

Time grid: ``t_i = i*T/(N-1)``.  Drift coefficients are piecewise constant,
with node ``i`` governing the interval ``(t_{i-1}, t_i]``; node 0 therefore
never enters the forward kernel.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import fastpath
from .errors import ConfigError, FeasibilityError, InvalidArgumentError, SingularKernelError
from .kernels import cholesky, lower_inverse_transpose, lyapunov_blockexp, mat_exp

X_JITTER = 1e-6


class Mode(str, Enum):
    CLD = "CLD"
    ULD = "ULD"
    VSCLD = "VSCLD"
    VSULD = "VSULD"
    VSDM_overdamped = "VSDM_overdamped"

    @property
    def variational(self):
        return self in (Mode.VSCLD, Mode.VSULD)


@dataclass(frozen=True)
class DiffusionConfig:
    beta: float = 5.0
    gamma: float = 2.0
    damping_ratio: float = 1.0
    horizon: float = 1.0
    grid_size: int = 125
    mode: Mode = Mode.CLD
    eps_feasible: float = 1e-3
    # "linear" ramps beta from beta_min at t=0 to ``beta`` at t=T (VP-style).
    beta_schedule: str = "constant"
    beta_min: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))

    @classmethod
    def preset(cls, name, **overrides):
        """Build from the ``MODE-beta`` naming used in the experiments, e.g. ``"VSULD-5"``.

        Underdamped presets default to R=0.7; CLD/ULD keep A=0 so their friction
        is set to ``2*sqrt(R)``.
        """
        mode_name, _, beta = name.partition("-")
        mode = Mode(mode_name)
        kw = {"mode": mode}
        if beta:
            kw["beta"] = float(beta)
        R = overrides.pop("damping_ratio", 0.7 if mode in (Mode.ULD, Mode.VSULD) else 1.0)
        kw["damping_ratio"] = R
        if mode in (Mode.CLD, Mode.ULD):
            kw["gamma"] = 2.0 * float(np.sqrt(R))
        kw.update(overrides)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @property
    def step(self):
        return self.horizon / (self.grid_size - 1)

    def times(self):
        return np.linspace(0.0, self.horizon, self.grid_size)

    def beta_table(self):
        if self.beta_schedule == "constant":
            return np.full(self.grid_size, float(self.beta))
        if self.beta_schedule == "linear":
            return self.beta_min + (self.beta - self.beta_min) * self.times() / self.horizon
        raise ConfigError(f"unknown beta_schedule {self.beta_schedule!r}")

    def validate(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0 (got {self.beta})")
        if self.beta_schedule == "linear" and not 0 < self.beta_min <= self.beta:
            raise ConfigError(f"beta_min must lie in (0, beta] (got {self.beta_min})")
        if self.beta_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown beta_schedule {self.beta_schedule!r}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0 (got {self.gamma})")
        if not 0 < self.damping_ratio <= 1:
            raise ConfigError(f"damping_ratio must lie in (0, 1] (got {self.damping_ratio})")
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be > 0 (got {self.horizon})")
        if int(self.grid_size) != self.grid_size or self.grid_size < 2:
            raise ConfigError(f"grid_size must be an integer >= 2 (got {self.grid_size})")
        if not 0 < self.eps_feasible < 1:
            raise ConfigError(f"eps_feasible must lie in (0, 1) (got {self.eps_feasible})")
        if self.mode == Mode.VSDM_overdamped:
            raise ConfigError("VSDM_overdamped has no momentum kernel in this build")
        if self.mode in (Mode.CLD, Mode.VSCLD) and self.damping_ratio != 1:
            raise ConfigError(f"{self.mode.value} requires damping_ratio=1 (got {self.damping_ratio})")
        if self.mode in (Mode.ULD, Mode.VSULD) and not self.damping_ratio < 1:
            raise ConfigError(f"{self.mode.value} requires damping_ratio<1 (got {self.damping_ratio})")
        if self.mode in (Mode.CLD, Mode.ULD):
            target = 2.0 * np.sqrt(self.damping_ratio)
            if abs(self.gamma - target) > 1e-9:
                raise ConfigError(
                    f"{self.mode.value} keeps A=0, so gamma must be 2*sqrt(R)={target:.12g} (got {self.gamma})"
                )
        return self

    def to_dict(self):
        return {
            "beta": float(self.beta),
            "gamma": float(self.gamma),
            "damping_ratio": float(self.damping_ratio),
            "horizon": float(self.horizon),
            "grid_size": int(self.grid_size),
            "mode": self.mode.value,
            "eps_feasible": float(self.eps_feasible),
            "beta_schedule": self.beta_schedule,
            "beta_min": float(self.beta_min),
        }

    @classmethod
    def from_dict(cls, d):
        kw = dict(d)
        for key in ("beta", "gamma", "damping_ratio", "horizon", "eps_feasible", "beta_min"):
            if key in kw:
                kw[key] = float(kw[key])
        if "grid_size" in kw:
            kw["grid_size"] = int(kw["grid_size"])
        return cls(**kw)


@dataclass
class VariationalSchedule:
    """Diagonal variational scores per node: ``a_x[i, j]``, ``a_v[i, j]``."""

    a_x: np.ndarray
    a_v: np.ndarray

    def __post_init__(self):
        self.a_x = np.array(self.a_x, dtype=np.float64, ndmin=2)
        self.a_v = np.array(self.a_v, dtype=np.float64, ndmin=2)
        if self.a_x.shape != self.a_v.shape:
            raise InvalidArgumentError(f"a_x {self.a_x.shape} and a_v {self.a_v.shape} differ in shape")

    @classmethod
    def zeros(cls, grid_size, dim):
        return cls(np.zeros((grid_size, dim)), np.zeros((grid_size, dim)))

    @classmethod
    def constant(cls, a_x, a_v, grid_size):
        a_x = np.atleast_1d(np.asarray(a_x, dtype=np.float64))
        a_v = np.atleast_1d(np.asarray(a_v, dtype=np.float64))
        return cls(np.tile(a_x, (grid_size, 1)), np.tile(a_v, (grid_size, 1)))

    @property
    def grid_size(self):
        return self.a_x.shape[0]

    @property
    def dim(self):
        return self.a_x.shape[1]

    def copy(self):
        return VariationalSchedule(self.a_x.copy(), self.a_v.copy())

    def stiffness(self, gamma):
        """``1 - 2*gamma*a_x`` per node and coordinate."""
        return 1.0 - 2.0 * gamma * self.a_x

    def friction(self, gamma):
        """``gamma*(1 - 2*a_v)`` per node and coordinate."""
        return gamma * (1.0 - 2.0 * self.a_v)

    def check_feasible(self, cfg):
        eps = cfg.eps_feasible
        for name, margin in (("1-2*gamma*a_x", self.stiffness(cfg.gamma)), ("1-2*a_v", 1.0 - 2.0 * self.a_v)):
            bad = ~(margin >= eps)
            if np.any(bad):
                node, coord = (int(i) for i in np.argwhere(bad)[0])
                raise FeasibilityError(
                    f"infeasible schedule at node {node}, coordinate {coord}: "
                    f"{name} = {margin[node, coord]:.6g} < {eps}",
                    node=node,
                    coord=coord,
                )
        return self

    def to_dict(self):
        return {"a_x": self.a_x.tolist(), "a_v": self.a_v.tolist()}


def initial_schedule(cfg, dim):
    """A_x = 0 with A_v from the damping transform for variational modes, A = 0 otherwise."""
    sched = VariationalSchedule.zeros(cfg.grid_size, dim)
    if cfg.mode.variational:
        sched.a_v[:] = damping_transform(cfg, 0.0)
    return sched


def drift_blocks(cfg, sched):
    """Per-coordinate 2x2 drift blocks ``[[0, -1], [1-2*gamma*a_x, gamma*(1-2*a_v)]]``, shape ``(N, d, 2, 2)``."""
    k = sched.stiffness(cfg.gamma)
    c = sched.friction(cfg.gamma)
    D = np.zeros(k.shape + (2, 2))
    D[..., 0, 1] = -1.0
    D[..., 1, 0] = k
    D[..., 1, 1] = c
    return D


def blocks_to_full(blocks):
    """Scatter ``(..., d, 2, 2)`` per-coordinate blocks into ``(..., 2d, 2d)`` matrices in (x, v) order."""
    d = blocks.shape[-3]
    out = np.zeros(blocks.shape[:-3] + (2 * d, 2 * d))
    idx = np.arange(d)
    for r in range(2):
        for c in range(2):
            out[..., r * d + idx, c * d + idx] = blocks[..., r, c]
    return out


def full_to_blocks(M):
    d = M.shape[-1] // 2
    idx = np.arange(d)
    out = np.empty(M.shape[:-2] + (d, 2, 2))
    for r in range(2):
        for c in range(2):
            out[..., r, c] = M[..., r * d + idx, c * d + idx]
    return out


def drift_matrix(cfg, sched, node, full=False):
    """Drift ``D_t`` at one node: ``(d, 2, 2)`` blocks, or the dense ``(2d, 2d)`` matrix."""
    if not 0 <= node < sched.grid_size:
        raise InvalidArgumentError(f"node {node} outside [0, {sched.grid_size})")
    sched.check_feasible(cfg)
    D = drift_blocks(cfg, sched)[node]
    return blocks_to_full(D) if full else D


def damping_transform(cfg, a_x):
    """``a_v = 1/2 - sqrt(R*(1 - 2*gamma*a_x))/gamma`` enforcing the chosen damping ratio."""
    a_x = np.asarray(a_x, dtype=np.float64)
    arg = cfg.damping_ratio * (1.0 - 2.0 * cfg.gamma * a_x)
    if np.any(~(arg >= 0)):
        raise FeasibilityError(f"damping transform undefined: R*(1-2*gamma*a_x) has negative entries (min {arg.min():.6g})")
    out = 0.5 - np.sqrt(arg) / cfg.gamma
    return float(out) if out.ndim == 0 else out


def effective_damping(cfg, a_x, a_v, beta=None):
    """Return ``(gamma_bar, omega0_sq)`` of the coupled probability-flow oscillator."""
    beta = cfg.beta if beta is None else beta
    gbar = 0.5 * beta * (cfg.gamma - 2.0 * cfg.gamma * np.asarray(a_v))
    w2 = 0.25 * beta**2 * (1.0 - 2.0 * cfg.gamma * np.asarray(a_x))
    return gbar, w2


def default_sigma0(dim, x_jitter=X_JITTER):
    """Conditional initial covariance per coordinate: point-mass x (jittered), v ~ N(0, 1)."""
    S = np.zeros((dim, 2, 2))
    S[:, 0, 0] = x_jitter
    S[:, 1, 1] = 1.0
    return S


def _interval_weights(cfg, t):
    """Weights ``w_j`` with ``int_0^t beta_s D_s ds = sum_j w_j beta_j D_j`` for piecewise-constant coefficients."""
    h = cfg.step
    edges = cfg.times()
    w = np.clip(np.minimum(t, edges) - (edges - h), 0.0, h)
    w[0] = 0.0
    return w


def integrated_drift(cfg, sched, t):
    """``(int_0^t beta D ds, int_0^t beta ds)`` as ``(d,2,2)`` blocks and a scalar."""
    w = _interval_weights(cfg, float(t)) * cfg.beta_table()
    D = drift_blocks(cfg, sched)
    return np.tensordot(w, D, axes=(0, 0)), float(w.sum())


def _cumulative_drift(cfg, sched):
    h = cfg.step
    wb = h * cfg.beta_table()
    wb[0] = 0.0
    D = drift_blocks(cfg, sched)
    Dint = np.cumsum(wb[:, None, None, None] * D, axis=0)
    bint = np.cumsum(wb)
    return Dint, bint


def _moments_from_integrals(cfg, Dint, bint, Sigma0, full):
    """Mean propagator and covariance from accumulated integrals (blocks ``(N, d, 2, 2)``)."""
    J = np.zeros((2, 2))
    J[1, 1] = 1.0
    Jint = np.broadcast_to(cfg.gamma * np.asarray(bint)[:, None, None, None] * J, Dint.shape)
    if full:
        Dint = blocks_to_full(Dint)
        Jint = blocks_to_full(Jint)
    Phi = mat_exp(-0.5 * Dint)
    try:
        res = lyapunov_blockexp(Dint, Jint, Sigma0)
    except SingularKernelError:
        for i in range(Dint.shape[0]):
            lyapunov_blockexp(Dint[i], Jint[i], Sigma0, node=i)
        raise
    return Phi, res.covariance()


@dataclass(frozen=True)
class PerturbationKernel:
    """Cached conditional law ``a_t | a_0 ~ N(Phi_t a_0, Sigma_t)`` on the time grid.

    In the diagonal layout every array is ``(N, d, 2, 2)``; in the dense layout
    ``(N, 2d, 2d)``.
    """

    times: np.ndarray
    beta: np.ndarray
    gamma: float
    Phi: np.ndarray
    Sigma: np.ndarray
    L: np.ndarray
    LinvT: np.ndarray
    Sigma0: np.ndarray
    full: bool = False
    kx: np.ndarray = field(default=None, repr=False)
    cv: np.ndarray = field(default=None, repr=False)

    @property
    def grid_size(self):
        return self.times.shape[0]

    @property
    def dim(self):
        return self.Sigma.shape[-1] // 2 if self.full else self.Sigma.shape[1]

    @property
    def step(self):
        return float(self.times[1] - self.times[0])

    def apply(self, M, a):
        """Apply a per-node operator (``M`` indexed already) to augmented states."""
        d = self.dim
        if self.full:
            if M.ndim == 2:
                return a @ M.T
            return np.einsum("nij,nj->ni", M, a)
        x, v = fastpath.apply_blocks(M, a[..., :d], a[..., d:])
        return np.concatenate([x, v], axis=-1)

    def covariance_full(self, node):
        return self.Sigma[node] if self.full else blocks_to_full(self.Sigma[node])


def build_kernel(cfg, sched, Sigma0=None, full=False):
    """Precompute ``Phi_t``, ``Sigma_{t|0}``, ``L_t`` and ``L_t^{-T}`` at every node."""
    cfg.validate()
    sched.check_feasible(cfg)
    if sched.grid_size != cfg.grid_size:
        raise InvalidArgumentError(f"schedule has {sched.grid_size} nodes, config expects {cfg.grid_size}")
    d = sched.dim
    if Sigma0 is None:
        Sigma0 = default_sigma0(d)
        if full:
            Sigma0 = blocks_to_full(Sigma0)
    Sigma0 = np.asarray(Sigma0, dtype=np.float64)
    if not full and Sigma0.shape == (2, 2):
        Sigma0 = np.broadcast_to(Sigma0, (d, 2, 2)).copy()
    Dint, bint = _cumulative_drift(cfg, sched)
    Phi, Sigma = _moments_from_integrals(cfg, Dint, bint, Sigma0, full)
    L = cholesky(Sigma)
    return PerturbationKernel(
        times=cfg.times(),
        beta=cfg.beta_table(),
        gamma=float(cfg.gamma),
        Phi=Phi,
        Sigma=Sigma,
        L=L,
        LinvT=lower_inverse_transpose(L),
        Sigma0=Sigma0,
        full=full,
        kx=sched.stiffness(cfg.gamma),
        cv=sched.friction(cfg.gamma),
    )


def moments_at(cfg, sched, t, Sigma0=None):
    """``(Phi_t, Sigma_{t|0})`` at an arbitrary time in ``[0, T]`` as ``(d, 2, 2)`` blocks."""
    if not -1e-12 <= t <= cfg.horizon + 1e-12:
        raise InvalidArgumentError(f"t={t} outside [0, {cfg.horizon}]")
    if Sigma0 is None:
        Sigma0 = default_sigma0(sched.dim)
    Dint, bint = integrated_drift(cfg, sched, t)
    Phi, Sigma = _moments_from_integrals(cfg, Dint[None], np.array([bint]), Sigma0, False)
    return Phi[0], Sigma[0]


def node_index(node, n):
    node = np.asarray(node)
    if node.ndim == 0:
        return np.full(n, int(node))
    return node.astype(np.int64)


def forward_sample(kernel, a0, node, eps):
    """Simulation-free draw ``a_t = Phi_t a0 + L_t eps`` and its target score ``-L_t^{-T} eps``.

    ``node`` is a scalar or one node per row of ``a0``.
    """
    a0 = np.atleast_2d(np.asarray(a0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if a0.shape != eps.shape:
        raise InvalidArgumentError(f"a0 {a0.shape} and eps {eps.shape} differ in shape")
    nodes = np.asarray(node)
    if nodes.ndim == 0:
        Phi, L, LinvT = kernel.Phi[int(nodes)], kernel.L[int(nodes)], kernel.LinvT[int(nodes)]
    else:
        Phi, L, LinvT = kernel.Phi[nodes], kernel.L[nodes], kernel.LinvT[nodes]
    a_t = kernel.apply(Phi, a0) + kernel.apply(L, eps)
    target = -kernel.apply(LinvT, eps)
    return a_t, target


@dataclass(frozen=True)
class GaussianPrior:
    """Mean-zero Gaussian with per-coordinate ``(d, 2, 2)`` (or dense) covariance."""

    cov: np.ndarray
    chol: np.ndarray
    full: bool = False

    @property
    def dim(self):
        return self.cov.shape[-1] // 2 if self.full else self.cov.shape[0]

    def sample(self, n, rng):
        d = self.dim
        eps = rng.standard_normal((n, 2 * d))
        if self.full:
            return eps @ self.chol.T
        x, v = fastpath.apply_blocks(self.chol, eps[:, :d], eps[:, d:])
        return np.concatenate([x, v], axis=1)

    def covariance_full(self):
        return self.cov if self.full else blocks_to_full(self.cov)


def terminal_prior(kernel):
    """Prior ``N(0, Sigma_{T|0})`` for the backward processes."""
    return GaussianPrior(cov=kernel.Sigma[-1], chol=kernel.L[-1], full=kernel.full)


def marginal_covariance(Phi, Sigma, data_var):
    """Covariance of ``a_t`` when ``x_0 ~ N(m, diag(data_var))`` and the kernel is conditional on ``x_0``.

    Works on ``(..., d, 2, 2)`` blocks: ``Phi diag(var, 0) Phi^T + Sigma``.
    """
    data_var = np.asarray(data_var, dtype=np.float64)
    P0 = Phi[..., :, 0]  # first column of each block
    outer = P0[..., :, None] * P0[..., None, :]
    return outer * data_var[..., :, None, None] + Sigma


class GaussianScore:
    """Exact marginal score of the forward process for Gaussian data ``N(mean, diag(var))``.

    Callable as ``score(a, t)`` for any ``t`` in ``[0, T]``; moments are cached per time.
    """

    def __init__(self, cfg, sched, data_var, data_mean=None, Sigma0=None):
        self.cfg = cfg
        self.sched = sched
        self.data_var = np.asarray(data_var, dtype=np.float64)
        d = self.data_var.shape[0]
        self.data_mean = np.zeros(d) if data_mean is None else np.asarray(data_mean, dtype=np.float64)
        self.Sigma0 = default_sigma0(d) if Sigma0 is None else Sigma0
        self._cache = {}

    def moments(self, t):
        key = round(float(t), 14)
        if key not in self._cache:
            Phi, Sigma = moments_at(self.cfg, self.sched, t, self.Sigma0)
            cov = marginal_covariance(Phi, Sigma, self.data_var)
            mean_x = Phi[:, 0, 0] * self.data_mean
            mean_v = Phi[:, 1, 0] * self.data_mean
            prec = np.linalg.inv(cov)
            self._cache[key] = (np.stack([mean_x, mean_v], axis=-1), cov, prec)
        return self._cache[key]

    def __call__(self, a, t):
        a = np.atleast_2d(a)
        d = self.data_var.shape[0]
        mean, _, prec = self.moments(t)
        x, v = fastpath.apply_blocks(prec, a[:, :d] - mean[:, 0], a[:, d:] - mean[:, 1])
        return -np.concatenate([x, v], axis=1)
