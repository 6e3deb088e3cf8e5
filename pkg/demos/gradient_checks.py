"""
Checking hand-written gradients
===============================

Every layer carries its own backward pass. ``grad_check`` compares those
against central differences, so a wrong derivative shows up as a large
relative error.
"""
import numpy as np

from hsigan.layers import ChannelNorm, Conv, SEBlock
from hsigan.networks import ModelConfig, build
from hsigan.tensor import Parameter, grad_check, make_rng
from hsigan.training import LossWeights, loss_egp

rng = make_rng(0)


def check_layer(layer, x):
    r = rng.standard_normal(layer.forward(x).shape)
    xp = Parameter("input", x)

    def f():
        return float(np.sum(layer.forward(xp.value) * r))

    def analytic():
        layer.forward(xp.value)
        xp.grad[...] = layer.backward(r)

    return grad_check(f, layer.params() + [xp], eps=1e-6, analytic=analytic)


for name, layer, x in [
    ("conv 3x3 stride 2", Conv(3, 4, 3, 2, rng=rng), rng.standard_normal((2, 3, 6, 6))),
    ("conv3d", Conv(2, 2, 3, ndim=3, rng=rng), rng.standard_normal((1, 2, 3, 4, 4))),
    ("channel norm", ChannelNorm(4), rng.standard_normal((2, 4, 3, 3))),
    ("squeeze-excitation", SEBlock(6, 2, rng=rng), rng.standard_normal((2, 6, 3, 3))),
]:
    rep = check_layer(layer, x)
    print(f"{name:20s} max rel error {rep.max_rel_error:.2e} over {rep.n_checked} entries")

# the whole encoder/generator/prior objective; rounding is swapped for the
# identity so the function is smooth enough for finite differences
bundle = build(ModelConfig("se", bands=2, width_scale=0.125, seed=0))
x = rng.uniform(size=(1, 2, 16, 16))


def objective():
    return loss_egp(bundle, x, LossWeights(l1_se=1e-3), lam=0.5, quant_mode="identity").total


rep = grad_check(objective, bundle.egp_params(), eps=1e-6, analytic=objective,
                 max_per_param=1, rng=rng)
print(f"full objective       max rel error {rep.max_rel_error:.2e} "
      f"(worst: {rep.worst_param})")
