import numpy as np
import pytest

from massedit import lm


def central_diff(f, x, eps=1e-6):
    """Central differences of scalar ``f`` in every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_batch(rng, n, vocab, prompt_len, answer_len):
    return lm.Batch(tuple(tuple(int(t) for t in rng.integers(0, vocab, prompt_len)) for _ in range(n)),
                    tuple(tuple(int(t) for t in rng.integers(0, vocab, answer_len)) for _ in range(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """width 4 -> hidden 6, one block, first FC editable (d=4, d'=6), vocab 8."""
    return lm.init_model(8, width=4, hidden=6, n_blocks=1, max_len=8, nonlinearity="tanh", seed=3,
                         editable_policy="first-fc-last-k", last_k=1)


@pytest.fixture
def small_model():
    return lm.init_model(16, width=8, hidden=12, n_blocks=2, max_len=8, seed=5, last_k=2)


# --------------------------------------------------------- acceptance lines

_ACCEPTANCE = []


@pytest.fixture
def acceptance_report():
    """``report(criterion, passed, detail)``; lines are printed in the terminal summary."""

    def report(criterion, passed, detail):
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
        print(_ACCEPTANCE[-1])
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
