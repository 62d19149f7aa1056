"""Shared oracles and helpers for the test suite.

The finite-difference gradient here is the independent oracle against which
the autodiff engine is checked: it never touches the engine's backward pass.
"""

import numpy as np
import pytest

from epift import tensor as T


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at 64-bit array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy(); xp[i] += eps
        xm = x.copy(); xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_op_grad(build, x, eps=1e-6, tol=1e-6):
    """AD gradient of sum(build(tensor)) vs central differences, 64-bit."""
    x = np.asarray(x, dtype=np.float64)
    t = T.Tensor(x.copy(), requires_grad=True)
    out = T.sum_(build(t))
    (ad,) = T.grad(out, [t])
    fd = fd_grad(lambda v: float(np.sum(_eval(build, v))), x, eps)
    err = rel_err(ad.data, fd)
    assert err <= tol, f"gradient mismatch: rel err {err:.3g} > {tol}"
    return err


def _eval(build, x):
    return build(T.Tensor(np.asarray(x, dtype=np.float64))).data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# pass/fail lines recorded by tests/test_acceptance.py; echoed after the run
# so they stay visible even though pytest captures stdout of passing tests
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
