import numpy as np
import pytest

from rollcast.tensor import backward_grad, forward_eval


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def graph_fd_check(graph, inputs, output, names, h=1e-5):
    """Relative error between reverse-mode and central-difference gradients."""
    forward_eval(graph, inputs)
    grads = backward_grad(graph, output, wrt=names)
    worst = 0.0
    for name in names:

        def f(v, name=name):
            return float(forward_eval(graph, {**inputs, name: v})[output])

        fd = central_difference(f, inputs[name], h)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(grads[name])), 1e-8)
        worst = max(worst, float(np.max(np.abs(fd - grads[name])) / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
