import numpy as np
import pytest

from vsmd import experiment as ex
from vsmd.config import RunConfig
from vsmd.errors import InvalidArgumentError
from vsmd.evaluation import crps_sum

SMALL = ["scorenet.hidden=32,32", "scorenet.batch_size=128", "sa.samples_per_stage=256", "data.n_points=2000"]


def _rc(extra):
    return RunConfig.load(None, SMALL + list(extra))


def test_cld_schedule_stays_exactly_zero():
    rc = _rc(["diffusion.preset=CLD-5", "scorenet.stages=3", "scorenet.steps_per_stage=50", "sa.eta0=1.0"])
    data, _ = ex.make_dataset(rc)
    res = ex.train_generative(rc, data)
    assert np.all(res.sched.a_x == 0.0) and np.all(res.sched.a_v == 0.0)
    assert all(r.eta == 0.0 for r in res.stage_records)


def test_vsuld_stretched_axis_schedule_moves():
    rc = _rc(["diffusion.preset=VSULD-5", "scorenet.stages=3", "scorenet.steps_per_stage=300", "sa.eta0=1e-3",
              "scorenet.hidden=64,64"])
    data, _ = ex.make_dataset(rc)
    res = ex.train_generative(rc, data)
    moved = np.abs(res.sched.a_x[1:, 1])
    assert moved.max() > 1e-3
    res.sched.check_feasible(rc.diffusion_config())


def test_resume_is_bitwise_identical(tmp_path):
    rc = _rc(["diffusion.preset=VSULD-5", "scorenet.stages=3", "scorenet.steps_per_stage=20", "sa.eta0=1e-3"])
    data, _ = ex.make_dataset(rc)
    full = ex.train_generative(rc, data, out_dir=tmp_path / "a")
    ex.train_generative(rc, data, out_dir=tmp_path / "b", stages=1)
    res = ex.train_generative(rc, data, out_dir=tmp_path / "b", resume=tmp_path / "b" / "checkpoints" / "stage_0001.npz")
    for name in ("loss.csv", "sa_stages.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    np.testing.assert_array_equal(res.sched.a_x, full.sched.a_x)
    for p, q in zip(res.net.params, full.net.params):
        np.testing.assert_array_equal(p, q)


def test_generate_deterministic_for_pf():
    rc = _rc(["diffusion.preset=CLD-5", "scorenet.stages=1", "scorenet.steps_per_stage=10"])
    data, _ = ex.make_dataset(rc)
    res = ex.train_generative(rc, data)
    a = ex.generate(rc, res.net, res.sched, 50, "pf_heun", seed=1).final
    b = ex.generate(rc, res.net, res.sched, 50, "pf_heun", seed=1).final
    np.testing.assert_array_equal(a, b)


def test_gaussian_task_dataset():
    rc = RunConfig.load(None, ["run.task=gaussian", "gaussian.variances=1,64", "gaussian.n_points=20000"])
    data, _ = ex.make_dataset(rc)
    assert data.shape == (20000, 2)
    np.testing.assert_allclose(data.var(0), [1, 64], rtol=0.05)


FORECAST = ["run.task=series", "diffusion.preset=VSULD-5", "diffusion.grid_size=25",
            "series.dims=2", "series.length=400", "series.context=8", "series.horizon=3",
            "scorenet.hidden=32,32", "scorenet.stages=2", "scorenet.steps_per_stage=100",
            "sa.samples_per_stage=64", "forecast.encoder_hidden=16", "forecast.encoder_out=4",
            "forecast.n_paths=20", "forecast.n_origins=2"]


def test_forecaster_smoke(tmp_path):
    rc = RunConfig.load(None, FORECAST)
    series, train_end = ex.split_series(rc)
    model = ex.train_forecaster(rc, series, train_end, out_dir=tmp_path)
    ex.save_forecaster(tmp_path / "f.npz", model, rc.model_hash())
    back = ex.load_forecaster(tmp_path / "f.npz", expected_hash=rc.model_hash())
    win = series[train_end - 8:train_end]
    a = ex.rollout(rc, model, win, 3, 20, "pf_heun", seed=0)
    b = ex.rollout(rc, back, win, 3, 20, "pf_heun", seed=0)
    assert a.shape == (20, 3, 2) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    # one path degenerates CRPS-Sum to the normalized absolute error of the summed series
    obs = series[train_end:train_end + 3]
    one = a[:1]
    want = np.mean(np.abs(one[0].sum(1) - obs.sum(1))) / np.mean(np.abs(obs.sum(1)))
    assert crps_sum(one, obs) == pytest.approx(want, rel=1e-14)
    with pytest.raises(InvalidArgumentError):
        ex.rollout(rc, model, win[1:], 3, 5)


def test_forecast_horizon_beyond_tail():
    rc = RunConfig.load(None, FORECAST + ["series.horizon=90", "forecast.train_fraction=0.8"])
    series, train_end = ex.split_series(rc)
    with pytest.raises(InvalidArgumentError):
        ex.forecast_origins(rc, series, train_end)


def test_climatology_draws_training_rows():
    s = np.arange(30.0).reshape(15, 2)
    c = ex.climatology(s, 4, 6, seed=0)
    assert c.shape == (6, 4, 2)
    rows = {tuple(r) for r in s}
    assert all(tuple(r) in rows for r in c.reshape(-1, 2))
