"""
The five objectives and their gradients
=======================================

Flow matching (FM), detailed balance (DB), trajectory balance (TB),
sub-trajectory balance (SubTB) and the entropy-weighted sub-network loss
(SubGFN) all read the same tabular parameters.  Gradients are computed in
closed form and checked here against central differences.
"""

import numpy as np

from subgfn.env import HyperGrid, Trajectory
from subgfn.exact import exact_flows, params_from_flows
from subgfn.losses import LOSS_KINDS, EntropyCache, LossSpec, loss_and_grad, subgfn_suffix_loss, subnet_entropy, tb_loss
from subgfn.model import init_params, sample_batch, trajectory_streams
from subgfn.trainer import grad_check

env = HyperGrid(2, 2)
p = init_params(env)
tau = Trajectory([0, env.index([0, 1]), env.index([1, 1])], [1, 0, 2])
print("TB loss of (0,0)->(0,1)->(1,1):", tb_loss(p, env, tau))
print("suffix loss from (0,1):", subgfn_suffix_loss(p, env, tau, 1), " (ln 10)^2 =", np.log(10) ** 2)
print("entropy of the sub-network at (0,0):", subnet_entropy(p, env, 0))

# %%
# Random parameters, a sampled batch, and a finite-difference check per loss.
env = HyperGrid(2, 3)
rng = np.random.default_rng(0)
p = init_params(env, "normal", rng=rng)
batch = sample_batch(p, env, trajectory_streams(0, 0, 8))
for kind in LOSS_KINDS:
    print(f"{kind:7s} max relative gradient error {grad_check(p, env, batch, LossSpec(kind)):.2e}")

# %%
# At the exact flows every loss is zero.
opt = params_from_flows(env, exact_flows(env))
for kind in LOSS_KINDS:
    value, _ = loss_and_grad(opt, env, batch, LossSpec(kind), EntropyCache(env), need_grad=False)
    print(f"{kind:7s} loss at optimum {value:.1e}")
