import numpy as np
import pytest
from scipy import stats

from oracles import pf_ode_rk4, sampler_moments
from vsmd.errors import DivergenceError, InvalidArgumentError
from vsmd.processes import DiffusionConfig, GaussianScore, VariationalSchedule, build_kernel, initial_schedule
from vsmd.samplers import (
    Trajectory,
    backward_aboba,
    backward_em,
    load_trajectory,
    pf_ode,
    run_sampler,
    save_trajectory,
    write_trajectory_csv,
)


def _setup(preset="CLD-5", d=1, var=(1.0,), mean=None, **kw):
    cfg = DiffusionConfig.preset(preset, **kw)
    sched = initial_schedule(cfg, d)
    k = build_kernel(cfg, sched)
    sc = GaussianScore(cfg, sched, np.array(var), None if mean is None else np.array(mean))
    return cfg, sched, k, sc


def _marginal_prior(sc, cfg, n, rng):
    mu, cov, _ = sc.moments(cfg.horizon)
    d = mu.shape[0]
    L = np.linalg.cholesky(cov)
    z = rng.normal(size=(n, d, 2))
    a = mu[None] + np.einsum("dij,ndj->ndi", L, z)
    return np.concatenate([a[..., 0], a[..., 1]], axis=1)


zero_score = lambda a, t: np.zeros_like(a)


def test_em_zero_score_zero_noise_is_linear_flow(rng):
    cfg, sched, k, _ = _setup()
    a = rng.normal(size=(5, 2))
    # drop the noise by using a generator that returns zeros
    class Zeros:
        def standard_normal(self, shape):
            return np.zeros(shape)
    out = backward_em(zero_score, cfg, sched, k, 5, Zeros(), prior_samples=a, keep_path=True)
    h, b = cfg.step, cfg.beta
    M = np.eye(2) + 0.5 * h * b * np.array([[0.0, -1.0], [1.0, 2.0]])
    np.testing.assert_allclose(out.states[1], a @ M.T, atol=1e-13)
    assert out.states.shape[0] == cfg.grid_size


def test_aboba_free_flight(rng):
    # zero stiffness and friction, zero noise: only the drift x <- x - h*beta/2*v survives
    cfg = DiffusionConfig(mode="VSCLD", gamma=2.0, grid_size=11)
    sched = VariationalSchedule.constant([0.2498], [0.0], 11)  # kx tiny
    sched.a_v[:] = 0.5 - 1e-9
    a = rng.normal(size=(4, 2))

    class Zeros:
        def standard_normal(self, shape):
            return np.zeros(shape)
    kx = sched.stiffness(cfg.gamma)[0, 0]
    cfg_ = cfg
    k = None
    out = backward_aboba(zero_score, cfg_, sched, k, 4, Zeros(), prior_samples=a, keep_path=True)
    h, b = cfg.step, cfg.beta
    x1 = out.states[1][:, 0]
    assert kx < 1e-3
    np.testing.assert_allclose(x1, a[:, 0] - 0.5 * h * b * a[:, 1], atol=5e-3 * np.abs(a).max())


def test_pf_zero_score_zero_drift_is_identity(rng):
    cfg = DiffusionConfig(mode="VSCLD", gamma=2.0, grid_size=20)
    sched = VariationalSchedule.constant([0.25 - 1e-12], [0.5 - 1e-12], 20)
    cfg = DiffusionConfig(mode="VSCLD", gamma=2.0, grid_size=20, eps_feasible=1e-13)
    a = rng.normal(size=(3, 2))
    # D still carries the -1 coupling of v into x; cancel it with beta -> tiny
    cfg = DiffusionConfig(mode="VSCLD", gamma=2.0, grid_size=20, eps_feasible=1e-13, beta=1e-14)
    out = pf_ode(zero_score, cfg, sched, None, 3, None, method="heun", prior_samples=a)
    np.testing.assert_allclose(out.final, a, atol=1e-12)


@pytest.mark.parametrize("name", ["em", "aboba", "pf_euler", "pf_heun"])
def test_samplers_recover_gaussian_data(name):
    rng = np.random.default_rng(11)
    var = np.array([1.0, 2.0])
    mean = np.array([0.5, -1.0])
    cfg, sched, k, sc = _setup("CLD-5", 2, var, mean, grid_size=250)
    n = 10_000
    prior = _marginal_prior(sc, cfg, n, rng)
    out = run_sampler(name, sc, cfg, sched, k, n, rng, prior_samples=prior)
    x = out.final[:, :2]
    se = np.sqrt(var / n)
    assert np.all(np.abs(x.mean(0) - mean) < 3 * se)
    assert np.all(np.abs(x.var(0) / var - 1) < 0.05)


def test_em_cld_d1_matches_data_within_mc_band():
    rng = np.random.default_rng(3)
    cfg, sched, k, sc = _setup("CLD-5", 1, (1.0,))
    n = 10_000
    x = backward_em(sc, cfg, sched, k, n, rng, prior_samples=_marginal_prior(sc, cfg, n, rng)).final[:, 0]
    assert abs(x.mean()) < 3 / np.sqrt(n)
    assert abs(x.var() - 1) < 3 * np.sqrt(2 / n) + 0.01  # plus the O(h) discretization bias


def test_em_refinement_shrinks_w1():
    rng = np.random.default_rng(5)
    n = 20_000
    ref = np.random.default_rng(6).normal(size=200_000)
    w = []
    for N in (125, 1000):
        cfg, sched, k, sc = _setup("CLD-5", 1, (1.0,), grid_size=N)
        x = backward_em(sc, cfg, sched, k, n, rng, prior_samples=_marginal_prior(sc, cfg, n, rng)).final[:, 0]
        w.append(stats.wasserstein_distance(x, ref))
    assert w[1] < w[0]


@pytest.mark.parametrize("preset", ["CLD-5", "VSULD-5"])
def test_aboba_bias_below_em_exact_moments(preset):
    # unit-scale and narrower data; at var 4 the two variance biases are about equal
    cfg = DiffusionConfig.preset(preset)
    sched = initial_schedule(cfg, 1)
    for var, mean in [(1.0, 0.0), (1.0, 2.0), (0.25, 1.0), (4.0, 2.0)]:
        me, ve = sampler_moments("em", cfg, sched, var, mean)
        ma, va = sampler_moments("aboba", cfg, sched, var, mean)
        assert abs(ma - mean) + abs(va - var) / var < abs(me - mean) + abs(ve - var) / var


def test_aboba_order_on_terminal_mean():
    errs = []
    for N in (126, 251, 501):
        cfg = DiffusionConfig.preset("CLD-5", grid_size=N)
        errs.append(sampler_moments("aboba", cfg, initial_schedule(cfg, 1), 1.0, 2.0)[0] - 2.0)
    order = np.log2(abs((errs[0] - errs[1]) / (errs[1] - errs[2])))
    assert order >= 1.5


@pytest.mark.parametrize("preset", ["CLD-5", "VSULD-5"])
def test_heun_matches_rk4_reference(preset):
    cfg, sched, k, sc = _setup(preset, 1, (1.0,))
    prior = _marginal_prior(sc, cfg, 500, np.random.default_rng(0))
    ref = pf_ode_rk4(sc, cfg, sched, prior, substeps=20)
    heun = pf_ode(sc, cfg, sched, k, 0, None, method="heun", prior_samples=prior).final
    euler = pf_ode(sc, cfg, sched, k, 0, None, method="euler", prior_samples=prior).final
    e_h, e_e = np.abs(heun - ref).max(), np.abs(euler - ref).max()
    assert e_h < 1e-3
    assert e_h <= e_e


def test_pf_ode_deterministic_rerun():
    cfg, sched, k, sc = _setup("VSULD-5", 1, (1.0,))
    a = pf_ode(sc, cfg, sched, k, 100, np.random.default_rng(9)).final
    b = pf_ode(sc, cfg, sched, k, 100, np.random.default_rng(9)).final
    np.testing.assert_array_equal(a, b)


def test_aboba_differs_from_em_with_same_seed():
    cfg, sched, k, sc = _setup("CLD-5", 1, (1.0,))
    a = backward_em(sc, cfg, sched, k, 50, np.random.default_rng(1)).final
    b = backward_aboba(sc, cfg, sched, k, 50, np.random.default_rng(1)).final
    assert not np.allclose(a, b)


def test_noise_enters_only_velocity():
    cfg, sched, k, _ = _setup("CLD-5", 2, (1.0, 1.0))
    a = np.zeros((3, 4))
    for fn in (backward_em, backward_aboba):
        out = fn(zero_score, cfg, sched, k, 3, np.random.default_rng(0), prior_samples=a, keep_path=True)
        # first step from a = 0: x is untouched by the kick (EM) or only through the v half-flight (ABOBA, O(h^2))
        step = out.states[1]
        assert np.all(np.abs(step[:, :2]) <= 0.5 * cfg.step * cfg.beta * np.abs(step[:, 2:]) + 1e-15)
        assert np.any(step[:, 2:] != 0)
    em1 = backward_em(zero_score, cfg, sched, k, 3, np.random.default_rng(0), prior_samples=a, keep_path=True)
    np.testing.assert_array_equal(em1.states[1][:, :2], 0.0)


def test_divergence_guard():
    cfg, sched, k, _ = _setup("CLD-5", 1, (1.0,))
    bad = lambda a, t: np.full_like(a, 1e9)
    with pytest.raises(DivergenceError) as exc:
        backward_em(bad, cfg, sched, k, 4, np.random.default_rng(0))
    assert exc.value.step == 1 and exc.value.h == pytest.approx(cfg.step)


def test_unknown_sampler_and_method():
    cfg, sched, k, sc = _setup()
    with pytest.raises(InvalidArgumentError):
        run_sampler("rk45", sc, cfg, sched, k, 2, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        pf_ode(sc, cfg, sched, k, 2, np.random.default_rng(0), method="midpoint")


def test_trajectory_io(tmp_path):
    cfg, sched, k, sc = _setup("CLD-5", 2, (1.0, 1.0), grid_size=6)
    tr = pf_ode(sc, cfg, sched, k, 3, np.random.default_rng(0), keep_path=True)
    assert isinstance(tr, Trajectory) and np.all(np.diff(tr.times) < 0)
    save_trajectory(tmp_path / "t.npz", tr)
    tr2 = load_trajectory(tmp_path / "t.npz")
    np.testing.assert_array_equal(tr2.states, tr.states)
    write_trajectory_csv(tmp_path / "t.csv", tr)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "sample,t,x0,x1,v0,v1"
    assert len(lines) == 1 + 3 * 6
    first = lines[1].split(",")
    assert float(first[1]) == pytest.approx(1.0) and float(first[2]) == float(tr.states[0, 0, 0])
