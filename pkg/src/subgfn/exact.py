"""Exact evaluation on enumerable environments.

Dynamic programs over the state DAG, a brute-force trajectory oracle, the
reward-proportional target and the distribution metrics used in training.
Distributions are plain ``(n_states,)`` arrays indexed by state ordinal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import BudgetError, DAGEnv, Trajectory
from .model import FlowParams, TrajectoryBatch, backward_log_probs, forward_log_probs, init_params, transition_log_pb

TRAJECTORY_BUDGET = 10**6
DP_ROOT_BLOCK = 2**22


@dataclass
class FlowTable:
    """State flows, edge flows (last column = terminating edge) and ``Z``."""

    state_flow: np.ndarray
    edge_flow: np.ndarray
    Z: float

    def inflow(self, env: DAGEnv) -> np.ndarray:
        out = np.zeros(env.n_states)
        for a in range(env.n_actions - 1):
            src = np.flatnonzero(env.action_mask[:, a])
            np.add.at(out, env.child_index[src, a], self.edge_flow[src, a])
        out[env.source] = self.Z
        return out

    def outflow(self) -> np.ndarray:
        return self.edge_flow.sum(axis=1)


def _reach(env: DAGEnv, pf: np.ndarray, init: np.ndarray, first_level: int = 0) -> np.ndarray:
    """Push probability mass ``init`` (R x N) through the move edges of ``env``."""
    reach = init
    for moves in env.level_moves[first_level:]:
        for a, src, dst in moves:
            reach[:, dst] += reach[:, src] * pf[src, a]
    return reach


def _local_env(env: DAGEnv, states: np.ndarray) -> DAGEnv:
    """The sub-DAG induced by a descendant-closed, sorted set of states."""
    sub = DAGEnv()
    child = env.child_index[states]
    local = np.where(child >= 0, np.searchsorted(states, np.maximum(child, 0)), -1)
    sub.n_states = len(states)
    sub.n_actions = env.n_actions
    sub.source = 0
    sub.child_index = local
    depth = env.depth[states]
    sub.depth = depth - depth.min()
    return sub


def terminating_matrix(params: FlowParams, env: DAGEnv, roots) -> np.ndarray:
    """Row ``i`` is the terminating distribution of rollouts started at ``roots[i]``."""
    roots = np.atleast_1d(np.asarray(roots, dtype=np.int64))
    pf = np.exp(forward_log_probs(params, env))
    out = np.empty((len(roots), env.n_states))
    block = max(1, DP_ROOT_BLOCK // env.n_states)
    for lo in range(0, len(roots), block):
        r = roots[lo:lo + block]
        init = np.zeros((len(r), env.n_states))
        init[np.arange(len(r)), r] = 1.0
        reach = _reach(env, pf, init, int(env.depth[r].min()))
        out[lo:lo + block] = reach * pf[:, -1]
    return out


def terminating_distribution(params: FlowParams, env: DAGEnv, root: int | None = None, budget: int | None = None) -> np.ndarray:
    """Exact law of the terminal state for forward-policy rollouts from ``root``.

    The DP runs over the descendants of ``root`` only; ``budget`` caps their
    number.
    """
    root = env.source if root is None else int(root)
    desc = env.descendants(root)
    if budget is not None and len(desc) > budget:
        raise BudgetError(f"{len(desc)} descendants of state {root} exceed the DP budget {budget}")
    out = np.zeros(env.n_states)
    if len(desc) == env.n_states:
        out[:] = terminating_matrix(params, env, [root])[0]
        return out
    sub = _local_env(env, desc)
    pf = np.exp(forward_log_probs(params, env, desc))
    init = np.zeros((1, len(desc)))
    init[0, 0] = 1.0
    out[desc] = _reach(sub, pf, init)[0] * pf[:, -1]
    return out


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in nats; zero entries contribute nothing."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = -terms.sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def true_distribution(env: DAGEnv) -> np.ndarray:
    r = env.reward_table
    return r / r.sum()


def l1_distance(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p), np.asarray(q)
    if p.shape != q.shape:
        raise ValueError(f"index spaces differ: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


def empirical_distribution(samples, env: DAGEnv) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.int64).ravel()
    if samples.size == 0:
        raise ValueError("empirical distribution of an empty sample set")
    return np.bincount(samples, minlength=env.n_states) / samples.size


def modes_found(env: DAGEnv, samples, threshold: float | None = None) -> int:
    """Distinct sampled terminal states whose reward reaches ``threshold``."""
    if threshold is None:
        threshold = 2.0 + env.R0
    samples = np.unique(np.asarray(samples, dtype=np.int64).ravel())
    return int((env.reward_table[samples] >= threshold).sum())


def count_trajectories(env: DAGEnv, root: int | None = None) -> int:
    root = env.source if root is None else int(root)
    paths = np.zeros(env.n_states, dtype=object)
    paths[root] = 1
    for moves in env.level_moves[int(env.depth[root]):]:
        for a, src, dst in moves:
            paths[dst] += paths[src]
    return int(paths.sum())


def enumerate_trajectories(env: DAGEnv, root: int | None = None, budget: int = TRAJECTORY_BUDGET) -> list[Trajectory]:
    """Every complete trajectory from ``root``, depth first, children in action order."""
    root = env.source if root is None else int(root)
    total = count_trajectories(env, root)
    if total > budget:
        raise BudgetError(f"{total} trajectories exceed the enumeration budget {budget}")
    stop = env.terminate_action
    out = []
    stack = [([root], [])]
    while stack:
        states, actions = stack.pop()
        if actions and actions[-1] == stop:
            out.append(Trajectory(states, actions))
            continue
        # reversed so that the first child is expanded first
        for a, nxt in reversed(env.children(states[-1])):
            if a == stop:
                stack.append((states, actions + [a]))
            else:
                stack.append((states + [nxt], actions + [a]))
    return out


def brute_force_flows(env: DAGEnv, backward: FlowParams | None = None, budget: int = TRAJECTORY_BUDGET) -> FlowTable:
    """Flows obtained by summing ``F(tau) = R(x) prod P_B`` over all trajectories.

    ``backward`` supplies the backward policy; ``None`` means uniform.
    """
    backward = init_params(env) if backward is None else backward
    trajs = enumerate_trajectories(env, budget=budget)
    batch = TrajectoryBatch.from_trajectories(trajs)
    log_pb = transition_log_pb(backward, env, batch)
    traj_flow = np.exp(env.log_reward[batch.terminals] + log_pb.sum(axis=1))
    valid = batch.valid
    rows = np.nonzero(valid)[0]
    state_flow = np.zeros(env.n_states)
    np.add.at(state_flow, batch.states[valid], traj_flow[rows])
    edge_flow = np.zeros((env.n_states, env.n_actions))
    np.add.at(edge_flow, (batch.states[valid], batch.actions[valid]), traj_flow[rows])
    return FlowTable(state_flow, edge_flow, float(traj_flow.sum()))


def exact_flows(env: DAGEnv, backward: FlowParams | None = None) -> FlowTable:
    """The same flows by a backward DP: ``F(s) = R(s) + sum_c F(c) P_B(s | c)``."""
    backward = init_params(env) if backward is None else backward
    pb = np.exp(backward_log_probs(backward, env))
    state_flow = env.reward_table.copy()
    edge_flow = np.zeros((env.n_states, env.n_actions))
    edge_flow[:, -1] = env.reward_table
    for moves in reversed(env.level_moves):
        for a, src, dst in moves:
            f = state_flow[dst] * pb[dst, a]
            edge_flow[src, a] = f
            state_flow[src] += f
    return FlowTable(state_flow, edge_flow, float(state_flow[env.source]))


def params_from_flows(env: DAGEnv, table: FlowTable, backward: FlowParams | None = None) -> FlowParams:
    """Parameters whose policy and flows reproduce ``table`` exactly."""
    with np.errstate(divide="ignore"):
        log_edge = np.log(table.edge_flow)
    logits = np.where(env.action_mask, log_edge - np.log(table.state_flow)[:, None], 0.0)
    params = FlowParams(float(np.log(table.Z)), logits, np.log(table.state_flow))
    if backward is not None:
        params.backward_mode = backward.backward_mode
        params.backward_logits = None if backward.backward_logits is None else backward.backward_logits.copy()
    return params
