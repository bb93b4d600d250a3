import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vsmd._accel import HAVE_NUMBA  # noqa: E402

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per fastpath backend."""
    from vsmd import _accel

    monkeypatch.setattr(_accel, "USE_NUMBA", request.param == "numba")
    return request.param


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail)``: print one PASS/FAIL line, keep it for the summary, then assert."""

    def _report(n, ok, detail):
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
