import numpy as np
import pytest

from hsigan.tensor import Parameter, grad_check, make_rng


def layer_grad_check(layer, x, seed=0, eps=1e-6, max_per_param=None):
    """Max relative error of a layer's parameter and input gradients.

    Objective is sum(layer(x) * r) with a fixed random r.
    """
    rng = make_rng(seed + 1000)
    r = rng.standard_normal(layer.forward(x).shape)
    xp = Parameter("input", x.copy())
    params = layer.params() + [xp]

    def f():
        return float(np.sum(layer.forward(xp.value) * r))

    def analytic():
        layer.forward(xp.value)
        xp.grad[...] = layer.backward(r)

    return grad_check(f, params, eps=eps, analytic=analytic,
                      max_per_param=max_per_param, rng=rng)


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
