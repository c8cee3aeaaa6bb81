import numpy as np
import pytest

from gliopipe import autodiff as ad


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def grad_check(build, tensors, eps=1e-5):
    """``build()`` returns a scalar Tensor from ``tensors``; returns the worst relative error."""
    for t in tensors:
        t.grad = None
    loss = build()
    ad.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        def f():
            with ad.no_grad():
                return build().item()
        gn = numeric_grad(f, t.values, eps)
        worst = max(worst, rel_err(ga, gn))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# filled by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
