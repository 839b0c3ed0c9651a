import numpy as np
import pytest

from vbsv import band

BACKENDS = ["python"] + (["compiled"] if band.BACKEND == "compiled" else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd_band(rng, T, w):
    """Random SPD band matrix: ``B B' `` with ``B`` lower banded, plus a small ridge."""
    B = np.zeros((T, T))
    for k in range(min(w, T - 1) + 1):
        B += np.diag(rng.normal(size=T - k), -k)
    a = np.tril(np.triu(B @ B.T, -w), w) + 0.1 * np.eye(T)
    return a


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """``verdict(number, ok, detail)`` records a PASS/FAIL line and prints it."""

    def record(number, ok, detail):
        line = f"criterion {number:>4}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS].append((float(str(number).rstrip("abcdefgh") or 0), line))
        print(line)
        return ok

    return record
