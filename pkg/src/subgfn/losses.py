"""Training objectives: FM, DB, TB, SubTB(lambda) and the entropy-weighted
sub-network loss, each with closed-form gradients.

All trajectory-level residuals are written as differences of a per-position
potential.  For a trajectory ``s_0 .. s_n`` followed by the sink at position
``n + 1``::

    u_k = log F(s_k) - sum_{t<k} log P_F(t) + sum_{t<k} log P_B(t)

with ``log F(s_0) = log Z`` and ``log F(sink) = log R(s_n)``.  Then the TB
residual is ``u_0 - u_{n+1}``, a sub-trajectory residual is ``u_i - u_j`` and
the residual of the suffix rooted at position ``k`` is ``u_k - u_{n+1}``.
Gradients are pushed back through ``u`` once, whatever the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .env import ConfigError, DAGEnv, Trajectory
from .exact import BudgetError, entropy, terminating_distribution, terminating_matrix
from .model import (
    ENTROPY_STREAM,
    FlowParams,
    PhiloxStreams,
    TrajectoryBatch,
    backward_log_probs,
    forward_log_probs,
    sample_batch,
    state_log_flow,
    trajectory_streams,
    transition_log_pb,
)

LossKind = Literal["fm", "db", "tb", "subtb", "subgfn"]
LOSS_KINDS = ("fm", "db", "tb", "subtb", "subgfn")


class NumericalError(FloatingPointError):
    """A loss or update left the domain of finite reals."""


@dataclass
class LossSpec:
    kind: LossKind = "tb"
    delta: float = 1e-6
    lam: float = 0.99
    entropy_mode: Literal["dp", "mc"] = "dp"
    mc_rollouts: int = 64
    entropy_refresh: int = 100
    entropy_floor: float = 1e-8
    dp_budget: int = 65536

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if not self.delta >= 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if not 0 < self.lam <= 1:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.entropy_mode not in ("dp", "mc"):
            raise ConfigError(f"unknown entropy mode {self.entropy_mode!r}")
        if self.mc_rollouts < 1 or self.entropy_refresh < 1:
            raise ConfigError("mc_rollouts and entropy_refresh must be >= 1")
        if not self.entropy_floor >= 0:
            raise ConfigError(f"entropy_floor must be >= 0, got {self.entropy_floor}")


class SubRoot(NamedTuple):
    state: int
    position: int


# --- flow-space residuals ---------------------------------------------------


def _log_ratio(num: float, den: float, delta: float) -> float:
    if delta == 0 and (num <= 0 or den <= 0):
        raise NumericalError(f"log((0 + {num}) / (0 + {den})) is undefined; use delta > 0")
    return float(np.log((delta + num) / (delta + den)))


def fm_residual(inflow: float, reward: float, outflow: float, delta: float = 0.0) -> float:
    """Squared log mismatch between inflow and reward plus non-sink outflow."""
    return _log_ratio(inflow, reward + outflow, delta) ** 2


def db_residual(forward_flow: float, backward_flow: float, delta: float = 0.0) -> float:
    """Squared log mismatch of the two expressions of one edge flow.

    For a terminating edge ``backward_flow`` is the reward.
    """
    return _log_ratio(forward_flow, backward_flow, delta) ** 2


# --- gradient accumulation --------------------------------------------------


class _Grad:
    """Gradient coefficients on log-probabilities and log-flows."""

    def __init__(self, env: DAGEnv, params: FlowParams):
        self.env, self.params = env, params
        self.log_Z = 0.0
        self.lpf = np.zeros((env.n_states, env.n_actions))
        self.lf = np.zeros(env.n_states)
        self.lpb = np.zeros(env.parent_index.shape) if params.backward_mode == "learned" else None

    def flow(self, states: np.ndarray, coef: np.ndarray) -> None:
        """Add ``coef`` to the gradient of ``log F(states)`` (source tied to ``log Z``)."""
        src = states == self.env.source
        self.log_Z += float(coef[src].sum())
        np.add.at(self.lf, states[~src], coef[~src])

    def pf(self, states, actions, coef) -> None:
        np.add.at(self.lpf, (states, actions), coef)

    def pb(self, children, slots, coef) -> None:
        if self.lpb is not None:
            np.add.at(self.lpb, (children, slots), coef)

    def finish(self) -> FlowParams:
        """Chain through the softmaxes: ``d log p_a / d z_k = [a == k] - p_k``."""
        env, params = self.env, self.params
        g_logits = np.zeros_like(params.forward_logits)
        rows = np.flatnonzero(self.lpf.any(axis=1))
        if len(rows):
            p = np.exp(forward_log_probs(params, env, rows))
            c = self.lpf[rows]
            g_logits[rows] = np.where(env.action_mask[rows], c - c.sum(axis=1, keepdims=True) * p, 0.0)
        g_back = None
        if self.lpb is not None:
            g_back = np.zeros_like(params.backward_logits)
            rows = np.flatnonzero(self.lpb.any(axis=1))
            if len(rows):
                p = np.exp(backward_log_probs(params, env, rows))
                c = self.lpb[rows]
                g_back[rows] = np.where(env.parent_mask[rows], c - c.sum(axis=1, keepdims=True) * p, 0.0)
        return FlowParams(self.log_Z, g_logits, self.lf, params.backward_mode, g_back)


# --- trajectory potentials ----------------------------------------------------


class _Potentials(NamedTuple):
    u: np.ndarray         # (B, W + 1)
    valid: np.ndarray     # (B, W + 1) positions 0..n+1
    lengths: np.ndarray


def _potentials(params: FlowParams, env: DAGEnv, batch: TrajectoryBatch) -> _Potentials:
    B, W = batch.states.shape
    moves = batch.valid
    lp = forward_log_probs(params, env, batch.states)
    lpf = np.where(moves, np.take_along_axis(lp, np.maximum(batch.actions, 0)[..., None], -1)[..., 0], 0.0)
    lpb = transition_log_pb(params, env, batch)
    step = lpb - lpf
    cum = np.zeros((B, W + 1))
    np.cumsum(step, axis=1, out=cum[:, 1:])
    G = np.empty((B, W + 1))
    G[:, :W] = state_log_flow(params, env, batch.states)
    n = batch.lengths
    rows = np.arange(B)
    G[rows, n + 1] = env.log_reward[batch.terminals]
    pos = np.arange(W + 1)[None, :]
    valid = pos <= (n + 1)[:, None]
    u = np.where(valid, G + cum, 0.0)
    return _Potentials(u, valid, n)


def _backprop_potentials(grad: _Grad, batch: TrajectoryBatch, du: np.ndarray) -> None:
    """Push ``dL/du`` into log-flow, log-P_F and log-P_B coefficients."""
    B, W = batch.states.shape
    n = batch.lengths
    flow_pos = np.arange(W)[None, :] <= n[:, None]
    grad.flow(batch.states[flow_pos], du[:, :W][flow_pos])
    # d u_k / d lpf_t = -1 and d u_k / d lpb_t = +1 for every k > t
    tail = np.cumsum(du[:, ::-1], axis=1)[:, ::-1][:, 1:]
    moves = batch.valid
    grad.pf(batch.states[moves], batch.actions[moves], -tail[moves])
    if grad.lpb is not None:
        back = np.arange(W)[None, :] < n[:, None]
        nxt = np.concatenate([batch.states[:, 1:], batch.states[:, -1:]], axis=1)
        grad.pb(nxt[back], batch.actions[back], tail[back])


# --- objectives on a batch ----------------------------------------------------


def _as_batch(batch) -> TrajectoryBatch:
    if isinstance(batch, TrajectoryBatch):
        if batch.size == 0:
            raise ValueError("empty batch")
        return batch
    if isinstance(batch, Trajectory):
        return TrajectoryBatch.from_trajectories([batch])
    return TrajectoryBatch.from_trajectories(list(batch))


def _tb(params, env, batch, grad):
    pot = _potentials(params, env, batch)
    rows = np.arange(batch.size)
    r = pot.u[:, 0] - pot.u[rows, pot.lengths + 1]
    if grad is not None:
        du = np.zeros_like(pot.u)
        c = 2.0 * r / batch.size
        du[:, 0] += c
        du[rows, pot.lengths + 1] -= c
        _backprop_potentials(grad, batch, du)
    return float(np.mean(r**2))


def _subtb(params, env, batch, grad, lam):
    pot = _potentials(params, env, batch)
    u, valid = pot.u, pot.valid
    K = u.shape[1]
    gap = np.arange(K)[None, :] - np.arange(K)[:, None]
    pair = (gap > 0)[None] & valid[:, None, :] & valid[:, :, None]
    w = np.where(pair, lam ** np.maximum(gap, 0)[None], 0.0)
    w /= w.sum(axis=(1, 2), keepdims=True)
    r = u[:, :, None] - u[:, None, :]
    if grad is not None:
        c = 2.0 * w * r / batch.size
        du = c.sum(axis=2) - c.sum(axis=1)
        _backprop_potentials(grad, batch, du)
    return float(np.mean((w * r**2).sum(axis=(1, 2))))


def _subgfn_weights(env, batch, weights_table, floor):
    pos = np.arange(batch.states.shape[1])[None, :]
    roots = (pos <= batch.lengths[:, None]) & env.branching[batch.states]
    w = np.where(roots, weights_table[batch.states], 0.0)
    if np.isnan(w).any():
        missing = np.unique(batch.states[np.isnan(w)])
        raise KeyError(f"no cached entropy for states {missing.tolist()}")
    if w.sum() <= floor:
        w = roots.astype(float)
    return w


def _subgfn(params, env, batch, grad, weights_table, floor):
    pot = _potentials(params, env, batch)
    rows = np.arange(batch.size)
    W = batch.states.shape[1]
    end = pot.u[rows, pot.lengths + 1]
    r = pot.u[:, :W] - end[:, None]
    w = _subgfn_weights(env, batch, weights_table, floor)
    total = w.sum()
    if total == 0:
        raise ValueError("batch has no branching states")
    if grad is not None:
        c = 2.0 * w * r / total
        du = np.zeros_like(pot.u)
        du[:, :W] = c
        du[rows, pot.lengths + 1] -= c.sum(axis=1)
        _backprop_potentials(grad, batch, du)
    return float((w * r**2).sum() / total)


def _lae_delta(x: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """``log(delta + exp(x))`` and its derivative in ``x``."""
    log_delta = np.log(delta) if delta > 0 else -np.inf
    val = np.logaddexp(log_delta, x)
    return val, np.exp(x - val)


def _flow_at(params, env, states):
    return state_log_flow(params, env, states)


def _fm_residuals(params, env, states, delta, grad=None, coef=None):
    """FM residuals at ``states``; with ``grad``, adds ``coef * d r``.

    The flow out of a state is taken as ``R(s) / P_F(stop | s)``, so that the
    terminating edge carries exactly the reward.  Edge flows are then
    ``R(s) P_F(s' | s) / P_F(stop | s)``.  Reading the flow from
    ``log_state_flow`` instead would leave ``P_F(stop | s)`` free: any value
    zeroes every residual once the non-sink edges match.
    """
    states = np.asarray(states, dtype=np.int64)
    stop = env.terminate_action
    lp = forward_log_probs(params, env)
    log_flow = env.log_reward - lp[:, stop]
    # inflow: parents' edge flows into each state; the source receives Z
    par = env.parent_index[states]
    is_src = states == env.source
    has = (par >= 0) & ~is_src[:, None]
    pidx = np.maximum(par, 0)
    slots = np.broadcast_to(np.arange(par.shape[1]), par.shape)
    terms = np.where(has, log_flow[pidx] + lp[pidx, slots], -np.inf)
    log_in = np.where(is_src, params.log_Z, np.logaddexp.reduce(terms, axis=1))
    # outflow: reward plus flow along non-sink children
    kids = env.action_mask[states, :-1]
    edges = np.where(kids, log_flow[states][:, None] + lp[states, :-1], -np.inf)
    log_out = np.logaddexp(env.log_reward[states], np.logaddexp.reduce(edges, axis=1))
    a_in, d_in = _lae_delta(log_in, delta)
    a_out, d_out = _lae_delta(log_out, delta)
    r = a_in - a_out
    if grad is not None:
        grad.log_Z += float((coef * d_in)[is_src].sum())
        g_in = np.where(has, np.exp(terms - log_in[:, None]), 0.0) * (coef * d_in)[:, None]
        grad.pf(pidx[has], slots[has], g_in[has])
        grad.pf(pidx[has], np.full(has.sum(), stop), -g_in[has])
        g_out = -np.where(kids, np.exp(edges - log_out[:, None]), 0.0) * (coef * d_out)[:, None]
        rr, cc = np.nonzero(kids)
        grad.pf(states[rr], cc, g_out[rr, cc])
        grad.pf(states, np.full(len(states), stop), -g_out.sum(axis=1))
    return r


def _db_residuals(params, env, states, actions, delta, grad=None, coef=None):
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    lp = forward_log_probs(params, env, states)
    fwd = _flow_at(params, env, states) + lp[np.arange(len(states)), actions]
    stop = actions == env.terminate_action
    child = env.child_index[states, actions]
    lpb = backward_log_probs(params, env, child)
    with np.errstate(invalid="ignore"):
        bwd = np.where(stop, env.log_reward[states],
                       _flow_at(params, env, child) + lpb[np.arange(len(states)), np.where(stop, 0, actions)])
    a_f, d_f = _lae_delta(fwd, delta)
    a_b, d_b = _lae_delta(bwd, delta)
    r = a_f - a_b
    if grad is not None:
        gf = coef * d_f
        grad.flow(states, gf)
        grad.pf(states, actions, gf)
        gb = -(coef * d_b)[~stop]
        grad.flow(child[~stop], gb)
        grad.pb(child[~stop], actions[~stop], gb)
    return r


def _fm(params, env, batch, grad, delta):
    states = np.unique(batch.states[batch.valid])
    r = _fm_residuals(params, env, states, delta)
    if grad is not None:
        _fm_residuals(params, env, states, delta, grad, 2.0 * r / len(states))
    return float(np.mean(r**2))


def _db(params, env, batch, grad, delta):
    A = env.n_actions
    keys = np.unique(batch.states[batch.valid] * A + batch.actions[batch.valid])
    s, a = keys // A, keys % A
    r = _db_residuals(params, env, s, a, delta)
    if grad is not None:
        _db_residuals(params, env, s, a, delta, grad, 2.0 * r / len(keys))
    return float(np.mean(r**2))


# --- public per-item losses ---------------------------------------------------


def fm_loss(params: FlowParams, env: DAGEnv, s: int, delta: float = 1e-6) -> float:
    return float(_fm_residuals(params, env, [s], delta)[0] ** 2)


def db_loss(params: FlowParams, env: DAGEnv, edge: tuple[int, int], delta: float = 1e-6) -> float:
    """``edge`` is ``(state, action)``; the terminate action selects the sink edge."""
    s, a = edge
    if not env.action_mask[s, a]:
        raise ValueError(f"action {a} is illegal at state {s}")
    return float(_db_residuals(params, env, [s], [a], delta)[0] ** 2)


def tb_loss(params: FlowParams, env: DAGEnv, traj: Trajectory) -> float:
    return _tb(params, env, _as_batch(traj), None)


def subtb_loss(params: FlowParams, env: DAGEnv, traj: Trajectory, lam: float = 0.99) -> float:
    return _subtb(params, env, _as_batch(traj), None, lam)


def extract_subroots(env: DAGEnv, traj: Trajectory) -> list[SubRoot]:
    return [SubRoot(int(s), k) for k, s in enumerate(traj.states) if env.branching[s]]


def subgfn_suffix_loss(params: FlowParams, env: DAGEnv, traj: Trajectory, root: SubRoot | int) -> float:
    """TB residual of the suffix of ``traj`` starting at ``root``.

    The suffix is scored as a trajectory of the sub-network rooted there, whose
    total flow is the learned flow of the root state.
    """
    pos = root.position if isinstance(root, SubRoot) else int(root)
    if not 0 <= pos <= traj.n or (isinstance(root, SubRoot) and traj.states[pos] != root.state):
        raise ValueError(f"root {root} does not lie on the trajectory")
    batch = _as_batch(traj)
    pot = _potentials(params, env, batch)
    return float((pot.u[0, pos] - pot.u[0, traj.n + 1]) ** 2)


# --- subnetwork entropy -------------------------------------------------------


def subnet_entropy(
    params: FlowParams,
    env: DAGEnv,
    s: int,
    mode: Literal["dp", "mc"] = "dp",
    m: int = 64,
    rng: np.random.Generator | None = None,
    budget: int = 65536,
) -> float:
    """Entropy of the terminal state of forward-policy rollouts started at ``s``."""
    if mode == "dp":
        return entropy(terminating_distribution(params, env, s, budget=budget))
    rngs = trajectory_streams(0, 0, m) if rng is None else rng.spawn(m)
    ends = sample_batch(params, env, rngs, start=s).terminals
    return entropy(np.bincount(ends) / m)


class EntropyCache:
    """Per-state subnetwork entropies, refreshed when older than ``spec.entropy_refresh`` steps.

    Only branching states are stored.  Monte-carlo estimates draw from streams
    keyed by ``(seed, state, step)``, so refreshes are reproducible.
    """

    def __init__(self, env: DAGEnv, spec: LossSpec | None = None, seed: int = 0):
        self.env = env
        self.spec = LossSpec(kind="subgfn") if spec is None else spec
        self.seed = seed
        self.values = np.full(env.n_states, np.nan)
        self.stamp = np.full(env.n_states, -1, dtype=np.int64)
        self._streams = PhiloxStreams(seed, ENTROPY_STREAM)

    def due(self, states, step: int) -> np.ndarray:
        states = np.unique(np.asarray(states, dtype=np.int64))
        states = states[self.env.branching[states]]
        old = (self.stamp[states] < 0) | (step - self.stamp[states] >= self.spec.entropy_refresh)
        return states[old]

    def refresh(self, params: FlowParams, states, step: int) -> None:
        states = np.asarray(states, dtype=np.int64)
        if len(states) == 0:
            return
        env, spec = self.env, self.spec
        if spec.entropy_mode == "dp" and env.n_states <= spec.dp_budget:
            self.values[states] = entropy(terminating_matrix(params, env, states), axis=1)
        else:
            for s in states:
                self.values[s] = self._one(params, int(s), step)
        self.stamp[states] = step

    def _one(self, params, s, step):
        spec = self.spec
        if spec.entropy_mode == "dp":
            try:
                return subnet_entropy(params, self.env, s, "dp", budget=spec.dp_budget)
            except BudgetError:
                pass
        u = self._streams.uniforms(step, spec.mc_rollouts, self.env.max_length, sub=s)
        ends = sample_batch(params, self.env, start=s, uniforms=u).terminals
        return entropy(np.bincount(ends) / spec.mc_rollouts)

    def update(self, params: FlowParams, states, step: int) -> None:
        self.refresh(params, self.due(states, step), step)

    def fill_missing(self, params: FlowParams, states, step: int = 0) -> None:
        states = np.unique(np.asarray(states, dtype=np.int64))
        states = states[self.env.branching[states] & (self.stamp[states] < 0)]
        self.refresh(params, states, step)

    def mean(self) -> float | None:
        vals = self.values[~np.isnan(self.values)]
        return float(vals.mean()) if len(vals) else None


def subgfn_batch_loss(params: FlowParams, env: DAGEnv, batch, cache: EntropyCache, spec: LossSpec | None = None) -> float:
    """Entropy-weighted mean of suffix losses over every (trajectory, branching state) pair.

    Missing cache entries are filled from ``params``; existing entries are used
    as they are, so weights stay constant while the loss is differentiated.
    """
    spec = cache.spec if spec is None else spec
    batch = _as_batch(batch)
    cache.fill_missing(params, batch.states[batch.valid])
    return _subgfn(params, env, batch, None, cache.values, spec.entropy_floor)


def loss_and_grad(
    params: FlowParams,
    env: DAGEnv,
    batch,
    spec: LossSpec,
    cache: EntropyCache | None = None,
    need_grad: bool = True,
) -> tuple[float, FlowParams | None]:
    """Batch loss and, optionally, its exact gradient in the layout of ``FlowParams``.

    FM averages over distinct visited states, DB over distinct visited edges
    (terminating edges included), TB and SubTB over trajectories, and the
    sub-network loss normalises by the total entropy weight of the batch.
    """
    batch = _as_batch(batch)
    grad = _Grad(env, params) if need_grad else None
    kind = spec.kind
    if kind == "tb":
        value = _tb(params, env, batch, grad)
    elif kind == "subtb":
        value = _subtb(params, env, batch, grad, spec.lam)
    elif kind == "subgfn":
        if cache is None:
            raise ValueError("the sub-network loss needs an EntropyCache")
        cache.fill_missing(params, batch.states[batch.valid])
        value = _subgfn(params, env, batch, grad, cache.values, spec.entropy_floor)
    elif kind == "fm":
        value = _fm(params, env, batch, grad, spec.delta)
    elif kind == "db":
        value = _db(params, env, batch, grad, spec.delta)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return value, None if grad is None else grad.finish()


def batch_loss(params: FlowParams, env: DAGEnv, batch, spec: LossSpec, cache: EntropyCache | None = None) -> float:
    return loss_and_grad(params, env, batch, spec, cache, need_grad=False)[0]


def stack_trajectories(trajs: Sequence[Trajectory]) -> TrajectoryBatch:
    return TrajectoryBatch.from_trajectories(trajs)
