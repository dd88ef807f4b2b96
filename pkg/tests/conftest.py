import os

import numpy as np
import pytest
from hypothesis import settings

os.environ.setdefault("POT_BACKEND_DISABLE_TENSORFLOW", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_PYTORCH", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_JAX", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_CUPY", "1")

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def numeric_grad(f, arr, eps=1e-6, indices=None):
    """Central differences of scalar f() w.r.t. entries of arr (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, echoed once at the end of the run whatever the capture mode
CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
