import numpy as np
import pytest

import rim.autodiff as ad


@pytest.fixture(autouse=True)
def _clean_tape():
    yield
    ad.current_graph().reset()


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(f, arr, index_list=None, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise TypeError("numeric_grad needs an ndarray it can perturb in place")
    idx = range(flat.size) if index_list is None else index_list
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out


def relative_errors(analytic, numeric):
    """Elementwise |a - n| / max(|a|, |n|), with entries below 1e-4 of the
    largest magnitude compared against that floor instead."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = 1e-4 * max(np.abs(n).max(initial=0), np.abs(a).max(initial=0), 1e-12)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_grads(loss_fn, tensors, rng=None, max_per_tensor=None, step=1e-5):
    """Max relative error between ``backward`` and finite differences.

    ``loss_fn()`` must build and return a scalar Tensor from ``tensors``.
    """
    with ad.new_graph() as graph:
        grads = ad.backward(loss_fn(), graph)

    def value():
        with ad.no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for t in tensors:
        size = t.data.size
        if max_per_tensor is not None and size > max_per_tensor:
            picks = (rng or np.random.default_rng(0)).choice(size, max_per_tensor, replace=False)
        else:
            picks = range(size)
        num = numeric_grad(value, t.data, picks, step)
        ana = grads[t].reshape(-1)[list(num)]
        worst = max(worst, float(relative_errors(ana, list(num.values())).max()))
    return worst


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
