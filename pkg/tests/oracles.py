"""Independent reference computations used by the test-suite.

Nothing here calls the package's closed-form kernel or samplers; each oracle
re-derives its quantity by a different route (ODE integration, series,
quadrature, exact Gaussian propagation).
"""
import math

import numpy as np
from scipy import integrate, optimize, stats


def expm_taylor(M, terms=60):
    """exp(M) by scaling/squaring around a plain Taylor series."""
    M = np.asarray(M, dtype=np.float64)
    nrm = np.linalg.norm(M, 1)
    s = max(0, int(math.ceil(math.log2(nrm))) + 1) if nrm > 0.5 else 0
    A = M / 2.0**s
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def block_drift(kx, cv):
    return np.array([[0.0, -1.0], [kx, cv]])


def rk4_lyapunov(beta_of_t, D_of_t, gamma, Sigma0, t_grid, substeps=200):
    """Integrate dS/dt = -beta/2 (D S + S D^T) + beta*gamma*J with classical RK4.

    ``D_of_t`` and ``beta_of_t`` are callables; returns S at each entry of ``t_grid``.
    """
    m = Sigma0.shape[0]
    J = np.zeros((m, m))
    J[m // 2:, m // 2:] = np.eye(m // 2)

    def f(t, S):
        D = D_of_t(t)
        b = beta_of_t(t)
        return -0.5 * b * (D @ S + S @ D.T) + b * gamma * J

    out = [Sigma0.copy()]
    S = Sigma0.copy()
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            k1 = f(t, S)
            k2 = f(t + h / 2, S + h / 2 * k1)
            k3 = f(t + h / 2, S + h / 2 * k2)
            k4 = f(t + h, S + h * k3)
            S = S + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out.append(S.copy())
    return np.stack(out)


def gaussian_crps_closed(mu, sigma, y):
    z = (y - mu) / sigma
    return sigma * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - 1 / math.sqrt(math.pi))


def gaussian_crps_quad(mu, sigma, y):
    """CRPS = int (F(u) - 1{u >= y})^2 du by adaptive quadrature."""
    F = lambda u: stats.norm.cdf(u, mu, sigma)
    left, _ = integrate.quad(lambda u: F(u) ** 2, -np.inf, y, limit=200)
    right, _ = integrate.quad(lambda u: (1 - F(u)) ** 2, y, np.inf, limit=200)
    return left + right


# --------------------------------------------------------------------------
# exact-score Gaussian SA fixed point
# --------------------------------------------------------------------------

def forward_covariances(cfg, sched, data_var, Sigma0_block, substeps=8):
    """RK4 covariances per node/coordinate: conditional on ``x0`` and marginal over ``x0 ~ N(0, var)``."""
    N = cfg.grid_size
    d = len(data_var)
    betas = cfg.beta_table()
    kx = sched.stiffness(cfg.gamma)
    cv = sched.friction(cfg.gamma)
    times = cfg.times()
    cond = np.zeros((N, d, 2, 2))
    marg = np.zeros((N, d, 2, 2))
    for j in range(d):
        Sc = Sigma0_block.copy()
        Sm = Sigma0_block.copy()
        Sm[0, 0] += data_var[j]
        cond[0, j], marg[0, j] = Sc, Sm
        for n in range(1, N):
            D = block_drift(kx[n, j], cv[n, j])
            grid = np.array([times[n - 1], times[n]])
            Sc = rk4_lyapunov(lambda t: betas[n], lambda t: D, cfg.gamma, Sc, grid, substeps)[-1]
            Sm = rk4_lyapunov(lambda t: betas[n], lambda t: D, cfg.gamma, Sm, grid, substeps)[-1]
            cond[n, j], marg[n, j] = Sc, Sm
    return cond, marg


def em_chain_covariances(cfg, sched, prec, prior_cov):
    """Exact covariances of the backward Euler-Maruyama chain with a linear score ``s = -P a``."""
    N = cfg.grid_size
    d = prec.shape[1]
    betas = cfg.beta_table()
    kx = sched.stiffness(cfg.gamma)
    cv = sched.friction(cfg.gamma)
    h, g = cfg.step, cfg.gamma
    C = np.zeros((N, d, 2, 2))
    C[N - 1] = prior_cov
    for n in range(N - 1, 0, -1):
        b = betas[n]
        for j in range(d):
            M = np.array([[1.0, -0.5 * h * b], [0.5 * h * b * kx[n, j], 1.0 + 0.5 * h * b * cv[n, j]]])
            M[1] -= h * b * g * prec[n, j, 1]
            Q = np.zeros((2, 2))
            if n > 1:
                Q[1, 1] = b * g * h
            C[n - 1, j] = M @ C[n, j] @ M.T + Q
    return C


def sa_fixed_point(cfg, data_var, damping, zeta=1.0, tol=1e-11, max_outer=200):
    """Stationary point of the expected SA update under exact scores and EM backward sampling.

    Per node and coordinate the expected gradient is
    ``beta*gamma*(a m_xx + a_v(a) m_xv + zeta*E[s_v x])`` with moments of the EM
    chain.  Solved by bisection per node inside an outer fixed-point sweep;
    KKT boundary value when no sign change exists.
    """
    from vsmd.processes import default_sigma0, initial_schedule

    d = len(data_var)
    sched = initial_schedule(cfg, d)
    hi = (1.0 - cfg.eps_feasible) / (2.0 * cfg.gamma)
    S0 = default_sigma0(1)[0]
    for it in range(max_outer):
        cond, marg = forward_covariances(cfg, sched, data_var, S0)
        prec = np.linalg.inv(marg)
        # the backward chain starts from N(0, Sigma_T|0), not from the data marginal
        C = em_chain_covariances(cfg, sched, prec, cond[-1])
        new = sched.a_x.copy()
        for n in range(1, cfg.grid_size):
            for j in range(d):
                mxx, mxv = C[n, j, 0, 0], C[n, j, 0, 1]
                P = prec[n, j]
                exs = -(P[1, 0] * mxx + P[1, 1] * mxv)
                f = lambda a: a * mxx + damping(a) * mxv + zeta * exs
                if f(hi) <= 0:
                    new[n, j] = hi
                else:
                    new[n, j] = optimize.brentq(f, -50.0, hi, xtol=1e-14)
        new[0] = new[1]
        delta = np.max(np.abs(new - sched.a_x))
        sched.a_x = new
        sched.a_v = np.asarray(damping(new), dtype=np.float64).reshape(new.shape)
        if delta < tol:
            return sched, it + 1
    raise RuntimeError(f"fixed point did not converge (last change {delta:.3g})")


# --------------------------------------------------------------------------
# batched RK4 for the kernel at every node (acceptance 1)
# --------------------------------------------------------------------------

def rk4_kernel_covariances(cfg, sched, Sigma0_blocks, steps=1000):
    """Sigma_{t_n|0} for every node and coordinate by RK4 on the Lyapunov ODE.

    For node ``n`` the drift is the time-average of the piecewise-constant
    drift over ``[0, t_n]`` (the matrix whose exponential the kernel uses).
    All nodes are integrated at once on rescaled time ``s = t / t_n``.
    """
    N, d = cfg.grid_size, sched.dim
    h = cfg.step
    betas = cfg.beta_table()
    kx, cv = sched.stiffness(cfg.gamma), sched.friction(cfg.gamma)
    D = np.zeros((N, d, 2, 2))
    D[..., 0, 1] = -1.0
    D[..., 1, 0] = kx
    D[..., 1, 1] = cv
    w = h * betas
    w[0] = 0.0
    Dint = np.cumsum(w[:, None, None, None] * D, axis=0)[1:]
    bint = np.cumsum(w)[1:]
    Dbar = Dint / bint[:, None, None, None]          # average drift, weighted by beta
    tn = cfg.times()[1:]
    beff = (bint / tn)[:, None, None, None]           # average beta
    J = np.zeros((2, 2))
    J[1, 1] = 1.0
    S = np.broadcast_to(Sigma0_blocks, Dbar.shape).copy()
    scale = tn[:, None, None, None]

    def f(S):
        DS = Dbar @ S
        return scale * (-0.5 * beff * (DS + np.swapaxes(DS, -1, -2)) + beff * cfg.gamma * J)

    ds = 1.0 / steps
    for _ in range(steps):
        k1 = f(S)
        k2 = f(S + 0.5 * ds * k1)
        k3 = f(S + 0.5 * ds * k2)
        k4 = f(S + ds * k3)
        S = S + ds / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.concatenate([np.broadcast_to(Sigma0_blocks, (1, d, 2, 2)), S], axis=0)


# --------------------------------------------------------------------------
# probability-flow reference (acceptance 8)
# --------------------------------------------------------------------------

def pf_ode_rk4(score, cfg, sched, a, substeps=40):
    """Classical RK4 with ``substeps`` per grid interval from ``T`` down to ``t_1``,
    then the same single noise-free Euler step to ``t = 0`` the samplers use."""
    d = a.shape[1] // 2
    times, betas = cfg.times(), cfg.beta_table()
    kx, cv, g = sched.stiffness(cfg.gamma), sched.friction(cfg.gamma), cfg.gamma

    def f(a, t, n):
        s = score(a, t)[:, d:]
        b = betas[n]
        return np.concatenate([-0.5 * b * a[:, d:], 0.5 * b * (kx[n] * a[:, :d] + cv[n] * a[:, d:]) + 0.5 * b * g * s], 1)

    a = a.copy()
    hh = cfg.step / substeps
    for n in range(cfg.grid_size - 1, 1, -1):
        for k in range(substeps):
            t = times[n] - k * hh
            k1 = f(a, t, n)
            k2 = f(a + 0.5 * hh * k1, t - 0.5 * hh, n)
            k3 = f(a + 0.5 * hh * k2, t - 0.5 * hh, n)
            k4 = f(a + hh * k3, t - hh, n)
            a = a + hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return a + cfg.step * f(a, times[1], 1)


# --------------------------------------------------------------------------
# exact first/second moments of the discrete samplers under a Gaussian score
# --------------------------------------------------------------------------

def sampler_moments(variant, cfg, sched, var, mean, start="marginal"):
    """Terminal ``(mean, variance)`` of ``x`` for the EM or ABOBA chain, d = 1.

    The exact score of ``N(mean, var)`` data is affine in the state, so each
    step maps the Gaussian law of ``a`` affinely; no sampling is involved.
    ``start="marginal"`` begins at the exact forward marginal at ``T`` (only
    discretization error remains); ``"prior"`` at the sampler's ``N(0, Sigma_T|0)``.
    """
    from vsmd.processes import GaussianScore

    sc = GaussianScore(cfg, sched, np.array([var]), np.array([mean]))
    times, betas = cfg.times(), cfg.beta_table()
    kx, cv = sched.stiffness(cfg.gamma)[:, 0], sched.friction(cfg.gamma)[:, 0]
    h, g = cfg.step, cfg.gamma
    mu, C, _ = sc.moments(cfg.horizon)
    if start == "marginal":
        m, C = mu[0].copy(), C[0].copy()
    else:
        from vsmd.processes import moments_at

        m, C = np.zeros(2), moments_at(cfg, sched, cfg.horizon)[1][0].copy()

    def score_row(t):
        mu, _, P = sc.moments(t)
        return -P[0][1], P[0][1] @ mu[0]

    def push(M, c=np.zeros(2), Q=np.zeros((2, 2))):
        return M @ m + c, M @ C @ M.T + Q

    for n in range(cfg.grid_size - 1, 0, -1):
        b = betas[n]
        if variant == "em" or n == 1:
            r, c0 = score_row(times[n])
            M = np.array([[1.0, -0.5 * h * b], [0.5 * h * b * kx[n], 1.0 + 0.5 * h * b * cv[n]]])
            M[1] += h * b * g * r
            Q = np.zeros((2, 2))
            Q[1, 1] = 0.0 if n == 1 else b * g * h
            m, C = push(M, np.array([0.0, h * b * g * c0]), Q)
        elif variant == "aboba":
            A = np.array([[1.0, -0.25 * h * b], [0.0, 1.0]])
            B = np.array([[1.0, 0.0], [0.25 * h * b * kx[n], 1.0]])
            m, C = push(B @ A)
            r, c0 = score_row(times[n] - 0.5 * h)
            # exact OU for the linear velocity part, frozen residual forcing
            z = 0.5 * b * cv[n] * h
            decay = math.exp(-z)
            kick = h * (-math.expm1(-z) / z)
            sd2 = b * g * h * (-math.expm1(-2 * z) / (2 * z))
            M = np.array([[1.0, 0.0], [0.0, decay]])
            M[1] += kick * b * (g * r + np.array([0.0, cv[n]]))
            Q = np.zeros((2, 2))
            Q[1, 1] = sd2
            m, C = push(M, np.array([0.0, kick * b * g * c0]), Q)
            m, C = push(A @ B)
        else:
            raise ValueError(variant)
    return m[0], C[0, 0]
