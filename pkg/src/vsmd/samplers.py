"""Reverse-time generation: Euler-Maruyama, ABOBA splitting and probability-flow ODE.

Score callables have the signature ``score_fn(a, t) -> (n, 2d)`` and return the
full augmented score; only its velocity block enters the dynamics because the
diffusion ``g g^T = beta*gamma*J`` acts on ``v`` alone.

Every sampler walks the grid from ``t_{N-1} = T`` down to ``t_1`` and then
takes one noise-free Euler step to ``t_0 = 0`` with the score at ``t_1``.
"""
from dataclasses import dataclass

import numpy as np

from . import fastpath
from .errors import DivergenceError, InvalidArgumentError
from .processes import terminal_prior

DIVERGENCE_LIMIT = 1e6


@dataclass
class Trajectory:
    """Backward path batch.  ``states`` is ``(K, n, 2d)`` with ``times`` strictly decreasing."""

    times: np.ndarray
    states: np.ndarray

    @property
    def final(self):
        return self.states[-1]

    @property
    def dim(self):
        return self.states.shape[-1] // 2

    def x(self):
        return self.states[..., : self.dim]

    def v(self):
        return self.states[..., self.dim:]


def _check(a, step, h):
    m = np.max(np.abs(a)) if a.size else 0.0
    if not m <= DIVERGENCE_LIMIT:
        raise DivergenceError(f"sampler diverged at step {step} (h={h:.6g}, max|a|={m:.3g})", step=step, h=h)


def _setup(cfg, sched, kernel, n_samples, rng, prior_samples):
    if sched.grid_size != cfg.grid_size:
        raise InvalidArgumentError("schedule and config disagree on grid size")
    if prior_samples is None:
        a = terminal_prior(kernel).sample(n_samples, rng)
    else:
        a = np.array(prior_samples, dtype=np.float64)
    return a, cfg.times(), cfg.beta_table(), sched.stiffness(cfg.gamma), sched.friction(cfg.gamma)


def _final_euler(score_fn, a, d, t1, beta, kx, cv, gamma, h):
    s_v = score_fn(a, t1)[:, d:]
    x, v = fastpath.em_update(a[:, :d], a[:, d:], kx, cv, beta, beta * gamma * s_v, np.zeros_like(s_v), h)
    return np.concatenate([x, v], axis=1)


def _record(path, a, keep_path):
    if keep_path:
        path.append(a.copy())


def backward_em(score_fn, cfg, sched, kernel, n_samples, rng, keep_path=False, prior_samples=None):
    """Euler-Maruyama discretization of the reverse-time SDE.

    ``a <- a + h*(beta/2 D a + beta*gamma*J s(a, t)) + sqrt(beta*gamma*h) (0, xi)``.
    """
    a, times, betas, kx, cv = _setup(cfg, sched, kernel, n_samples, rng, prior_samples)
    d, h, gamma = a.shape[1] // 2, cfg.step, cfg.gamma
    N = cfg.grid_size
    path = [a.copy()] if keep_path else []
    for n in range(N - 1, 1, -1):
        b = betas[n]
        s_v = score_fn(a, times[n])[:, d:]
        noise = np.sqrt(b * gamma * h) * rng.standard_normal(s_v.shape)
        x, v = fastpath.em_update(a[:, :d], a[:, d:], kx[n], cv[n], b, b * gamma * s_v, noise, h)
        a = np.concatenate([x, v], axis=1)
        _check(a, N - n, h)
        _record(path, a, keep_path)
    a = _final_euler(score_fn, a, d, times[1], betas[1], kx[1], cv[1], gamma, h)
    _check(a, N - 1, h)
    _record(path, a, keep_path)
    return _trajectory(times, path, a, keep_path)


def backward_aboba(score_fn, cfg, sched, kernel, n_samples, rng, keep_path=False, prior_samples=None):
    """Symmetric ABOBA splitting of the reverse-time SDE.

    Per step: A/2 (free flight), B/2 (position force), O, B/2, A/2.  The O step
    solves the linear velocity dynamics (anti-friction plus the score of the
    invariant velocity law) as an exact OU process and applies the remaining
    score residual, evaluated at the half-step state and time, as a frozen forcing.
    """
    a, times, betas, kx, cv = _setup(cfg, sched, kernel, n_samples, rng, prior_samples)
    d, h, gamma = a.shape[1] // 2, cfg.step, cfg.gamma
    N = cfg.grid_size
    path = [a.copy()] if keep_path else []
    x, v = a[:, :d].copy(), a[:, d:].copy()
    for n in range(N - 1, 1, -1):
        b = betas[n]
        x, v = fastpath.ab_half(x, v, kx[n], b, h)
        s_v = score_fn(np.concatenate([x, v], axis=1), times[n] - 0.5 * h)[:, d:]
        xi = rng.standard_normal(v.shape)
        decay, kick, sd = fastpath.o_coefficients(cv[n], b, gamma, h)
        v = fastpath.o_update(v, decay, kick, sd, b * (gamma * s_v + cv[n] * v), xi)
        x, v = fastpath.ba_half(x, v, kx[n], b, h)
        a = np.concatenate([x, v], axis=1)
        _check(a, N - n, h)
        _record(path, a, keep_path)
    a = _final_euler(score_fn, np.concatenate([x, v], axis=1), d, times[1], betas[1], kx[1], cv[1], gamma, h)
    _check(a, N - 1, h)
    _record(path, a, keep_path)
    return _trajectory(times, path, a, keep_path)


def _pf_rhs(score_fn, a, t, d, beta, kx, cv, gamma):
    """Reverse-time velocity field ``beta/2 D a + beta*gamma/2 J s``."""
    x, v = a[:, :d], a[:, d:]
    s_v = score_fn(a, t)[:, d:]
    fx = -0.5 * beta * v
    fv = 0.5 * beta * (kx * x + cv * v) + 0.5 * beta * gamma * s_v
    return np.concatenate([fx, fv], axis=1)


def pf_ode(score_fn, cfg, sched, kernel, n_samples, rng, method="heun", keep_path=False, prior_samples=None):
    """Probability-flow ODE integrated from ``T`` to ``0`` with Euler or Heun steps.

    Randomness enters only through the prior draw.  The last step is Euler
    (the score at ``t = 0`` is never evaluated).
    """
    if method not in ("euler", "heun"):
        raise InvalidArgumentError(f"unknown pf_ode method {method!r}")
    a, times, betas, kx, cv = _setup(cfg, sched, kernel, n_samples, rng, prior_samples)
    d, h, gamma = a.shape[1] // 2, cfg.step, cfg.gamma
    N = cfg.grid_size
    path = [a.copy()] if keep_path else []
    for n in range(N - 1, 0, -1):
        b = betas[n]
        f0 = _pf_rhs(score_fn, a, times[n], d, b, kx[n], cv[n], gamma)
        if method == "heun" and n > 1:
            pred = a + h * f0
            f1 = _pf_rhs(score_fn, pred, times[n - 1], d, b, kx[n], cv[n], gamma)
            a = a + 0.5 * h * (f0 + f1)
        else:
            a = a + h * f0
        _check(a, N - n, h)
        _record(path, a, keep_path)
    return _trajectory(times, path, a, keep_path)


def _trajectory(times, path, final, keep_path):
    if keep_path:
        return Trajectory(times=times[::-1].copy(), states=np.stack(path))
    return Trajectory(times=np.array([times[-1], times[0]]), states=np.stack([np.full_like(final, np.nan), final]))


SAMPLERS = {
    "em": backward_em,
    "aboba": backward_aboba,
    "pf_euler": lambda *a, **k: pf_ode(*a, method="euler", **k),
    "pf_heun": lambda *a, **k: pf_ode(*a, method="heun", **k),
}


def run_sampler(name, score_fn, cfg, sched, kernel, n_samples, rng, **kw):
    try:
        fn = SAMPLERS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown sampler {name!r}; choose from {sorted(SAMPLERS)}") from None
    return fn(score_fn, cfg, sched, kernel, n_samples, rng, **kw)


def write_trajectory_csv(path, traj, every=1):
    """One row per sample per saved node: ``t, x_1..x_d, v_1..v_d`` (17 significant digits)."""
    d = traj.dim
    header = ["sample", "t"] + [f"x{j}" for j in range(d)] + [f"v{j}" for j in range(d)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(0, traj.states.shape[0], every):
            t = traj.times[k]
            for i, row in enumerate(traj.states[k]):
                if np.all(np.isnan(row)):
                    continue
                fh.write(f"{i},{t:.17g}," + ",".join(f"{val:.17g}" for val in row) + "\n")


def save_trajectory(path, traj):
    with open(path, "wb") as fh:
        np.savez_compressed(fh, times=traj.times, states=traj.states)


def load_trajectory(path):
    z = np.load(path)
    return Trajectory(times=z["times"], states=z["states"])
