import numpy as np
import pytest

from prefixcond.numerics import Tensor, backward
from prefixcond.numerics.gradcheck import numerical_grad, relative_error


def gradcheck(fn, *arrays, h=1e-5, wrt=None):
    """Max relative error between autodiff and central differences.

    ``fn`` maps Tensors to a scalar Tensor. ``wrt`` selects which inputs
    are checked (all by default).
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*tensors))
    worst = 0.0
    for i in wrt:

        def f(x, i=i):
            args = [Tensor(x) if j == i else Tensor(a) for j, a in enumerate(arrays)]
            return float(fn(*args).data)

        num = numerical_grad(f, arrays[i], h)
        worst = max(worst, relative_error(tensors[i].grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
