"""
Exact evaluation and the brute-force oracle
===========================================

On small grids every trajectory can be listed.  That gives an independent
check of the dynamic program that computes the terminating distribution, and
of the flows that make the sampler exact.
"""

import numpy as np

from subgfn.env import HyperGrid
from subgfn.exact import (
    brute_force_flows,
    count_trajectories,
    enumerate_trajectories,
    exact_flows,
    l1_distance,
    params_from_flows,
    terminating_distribution,
    true_distribution,
)
from subgfn.model import init_params

env = HyperGrid(2, 2)
for t in enumerate_trajectories(env):
    print([env.state(s) for s in t.states], "actions", t.actions.tolist())

# With the uniform forward policy the four terminal states are reached with
# probabilities 1/3, 1/6, 1/6, 1/3.
print(terminating_distribution(init_params(env), env))

# %%
# Flows from the trajectory sum agree with a backward DP, and satisfy
# inflow = outflow at every state.
env = HyperGrid(2, 3)
print("trajectories on 3x3:", count_trajectories(env))
bf, dp = brute_force_flows(env), exact_flows(env)
print("max state-flow gap:", np.abs(bf.state_flow - dp.state_flow).max())
print("flow matching residual:", np.abs(bf.inflow(env) - bf.outflow()).max())
print("Z =", bf.Z, " sum of rewards =", env.reward_table.sum())

# %%
# Parameters read off these flows sample exactly from R / Z.
env = HyperGrid(2, 8)
opt = params_from_flows(env, exact_flows(env))
print("L1 to target at the optimum:", l1_distance(terminating_distribution(opt, env), true_distribution(env)))
