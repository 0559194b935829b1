import numpy as np
import pytest

from poseattn import autodiff as ad
from poseattn.autodiff import Array, Tape
from poseattn.optim import finite_difference_gradient, relative_error

GRAD_TOL = 1e-4


def grad_check(fn, arrays, seed=0, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a list of Arrays to an Array; the scalar objective is a fixed
    random projection of its output so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    params = [Array(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    probe = None

    def objective_arrays():
        nonlocal probe
        out = fn(params)
        if probe is None:
            probe = rng.uniform(0.5, 1.5, out.shape) * rng.choice([-1.0, 1.0], out.shape)
        return ad.sum(ad.mul(out, Array(probe)))

    with Tape():
        loss = objective_arrays()
        analytic = ad.backward(loss, params)
    numeric = finite_difference_gradient(lambda: float(objective_arrays().data), [p.data for p in params], step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Recorder for acceptance verdicts, echoed in the terminal summary."""

    def record(n, ok, detail):
        _CRITERIA[n] = (ok, detail)
        print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
