import os
import subprocess
import sys

import numpy as np
import pytest

from oracles import expm_taylor
from vsmd import fastpath
from vsmd._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def _both(name, *args):
    a = getattr(fastpath, f"_{name}_numpy")(*[x.copy() if isinstance(x, np.ndarray) else x for x in args])
    b = getattr(fastpath, f"_{name}_numba")(*[x.copy() if isinstance(x, np.ndarray) else x for x in args])
    return a, b


def _close(a, b, tol=1e-12):
    if isinstance(a, tuple):
        for u, w in zip(a, b):
            np.testing.assert_allclose(u, w, rtol=tol, atol=tol)
    else:
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@needs_numba
def test_backends_agree_on_deterministic_kernels(rng):
    n, d = 64, 3
    x, v = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    kx, cv = rng.uniform(0.2, 1.5, d), rng.uniform(0.5, 2.5, d)
    S = rng.normal(size=(10, 2, 2))
    S = S @ np.swapaxes(S, 1, 2) + 0.1 * np.eye(2)
    _close(*_both("expm_batch", rng.normal(size=(10, 4, 4))))
    _close(*_both("chol2_batch", S))
    _close(*_both("apply_blocks", rng.normal(size=(1, d, 2, 2)), x, v))
    _close(*_both("apply_blocks", rng.normal(size=(n, d, 2, 2)), x, v))
    _close(*_both("em_update", x, v, kx, cv, 5.0, rng.normal(size=(n, d)), rng.normal(size=(n, d)), 0.01))
    _close(*_both("ab_half", x, v, kx, 5.0, 0.01))
    _close(*_both("ba_half", x, v, kx, 5.0, 0.01))
    dec, kick, sd = fastpath.o_coefficients(cv, 5.0, 2.0, 0.01)
    _close(*_both("o_update", v, dec, kick, sd, rng.normal(size=(n, d)), rng.normal(size=(n, d))))
    _close(*_both("crps_ensemble", rng.normal(size=(30, 7)), rng.normal(size=7)), tol=1e-10)
    _close(*_both("forward_em", x, v, kx, cv, 5.0, 2.0, 0.01, rng.normal(size=(n, d))))
    _close(*_both("expm_batch", 40.0 * rng.normal(size=(6, 3, 3))), tol=1e-9)  # exercises squaring


def test_dispatch_follows_backend(backend, rng):
    A = rng.normal(size=(5, 4, 4))
    out = fastpath.expm_batch(A)
    for i in range(5):
        np.testing.assert_allclose(out[i], expm_taylor(A[i]), rtol=1e-10, atol=1e-12)
    S = np.array([[[4.0, 2.0], [2.0, 5.0]]])
    np.testing.assert_allclose(fastpath.chol2_batch(S)[0], [[2.0, 0.0], [1.0, 2.0]])


def test_forward_em_statistics_per_backend(backend):
    # OU with kx=1, cv=2: stationary law N(0, I)
    n = 40_000
    x, v = fastpath.forward_em(np.zeros((n, 1)), np.zeros((n, 1)), np.ones(1), np.full(1, 2.0), 5.0, 2.0,
                               2e-3, 1500, 7)
    assert abs(x.var() - 1) < 0.05 and abs(v.var() - 1) < 0.05


def test_o_coefficients_limits():
    dec, kick, sd = fastpath.o_coefficients(np.array([0.0, 1e-12, 2.0]), 5.0, 2.0, 0.01)
    np.testing.assert_allclose(dec[:2], 1.0)
    np.testing.assert_allclose(kick[:2], 0.01, rtol=1e-10)
    np.testing.assert_allclose(sd[:2], np.sqrt(5.0 * 2.0 * 0.01), rtol=1e-10)
    z = 0.5 * 5.0 * 2.0 * 0.01
    assert dec[2] == pytest.approx(np.exp(-z))
    assert kick[2] == pytest.approx(0.01 * (1 - np.exp(-z)) / z)
    _, _, sd0 = fastpath.o_coefficients(np.array([1.0]), 5.0, 2.0, 0.01, noise_on=False)
    assert sd0[0] == 0.0


def test_env_flag_selects_numpy():
    code = "from vsmd._accel import backend; print(backend())"
    env = dict(os.environ, VSMD_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
