"""
The hypergrid environment
=========================

States are points of a D-dimensional grid with side H.  Each action bumps one
coordinate up by one; the extra action ends the trajectory at the current
point.  Run with ``python3 demos/01_hypergrid_and_rewards.py``.
"""

import numpy as np

from subgfn.env import HyperGrid

env = HyperGrid(D=2, H=8, R0=0.1)
print("states:", env.n_states, " actions:", env.n_actions, " longest trajectory:", env.max_length)

# States are addressed by a dense index; coordinates go in and out freely.
s = env.index([3, 5])
print("index of (3, 5):", s, " back to coords:", env.state(s))
print("children of (3, 5):", [(a, None if c is None else env.state(c)) for a, c in env.children(s)])
print("parents of (3, 5):", [(env.state(p), a) for p, a in env.parents(s)])

# %%
# The reward: a baseline R0, a plateau of 0.5 in the outer band and an extra
# 2 in the inner band, which gives four peaks near the corners.
grid = env.reward_table.reshape(env.H, env.H)
np.set_printoptions(precision=1, linewidth=120)
print(grid)
print("modes (reward >= 2 + R0):", int((env.reward_table >= 2 + env.R0).sum()))

# %%
# "half-open" closes the outer band on the right, which also rewards the
# faces of the grid.
half = HyperGrid(2, 8, interval_closure="half-open")
print(half.reward_table.reshape(8, 8))
