"""
Steering the bitrate with a target rate
=======================================

The rate weight switches between a large lambda_a (while the measured rate is
above the target r_t) and a small lambda_b. Two short runs that differ only in
r_t show the effect on the logged rate.
"""
import numpy as np

from hsigan.evalio import synth_dataset
from hsigan.networks import ModelConfig
from hsigan.training import TARGET_LAMBDAS, LossWeights, lambda_select, train

print("target rate -> lambda_a:", TARGET_LAMBDAS)
print("lambda_b:", LossWeights().lambda_b)

# the controller is a step function with its break at r_t (strictly above)
for r in (0.1, 0.2, 0.3):
    print(f"rate {r} with r_t=0.2 -> lambda {lambda_select(r, 0.2)}")

cubes, split = synth_dataset(40, bands=8, height=32, width=32, seed=1)
x = np.stack([cubes[i].values for i in split.train])

for r_t in (0.2, 0.8):
    res = train(ModelConfig("opt", bands=8, width_scale=0.125, seed=1), x, r_t=r_t,
                steps_pretrain=80, steps_gan=0, seed=1)
    rates = [row["rate_bpp"] for row in res.log]
    lams = sorted({row["lambda"] for row in res.log})
    print(f"r_t={r_t}: rate {rates[0]:.3f} -> {rates[-1]:.3f} bits/pixel, lambdas used {lams}")
