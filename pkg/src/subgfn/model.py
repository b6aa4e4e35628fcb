"""Tabular flow parameterization, policies and on-policy sampling."""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .env import ConfigError, DAGEnv, Trajectory

SAMPLE_STREAM = 0
ENTROPY_STREAM = 1
EVAL_STREAM = 2
FULL_TABLE_LIMIT = 2**18
SCALAR_TABLE_LIMIT = 2**12


@dataclass
class FlowParams:
    """Global ``log_Z``, per-state forward logits and log state flows.

    ``forward_logits`` has one column per action; columns of illegal actions
    are ignored.  ``log_state_flow[source]`` is never read: the source flow is
    ``log_Z``.  ``backward_logits`` is only used when ``backward_mode`` is
    ``"learned"``.
    """

    log_Z: float
    forward_logits: np.ndarray
    log_state_flow: np.ndarray
    backward_mode: Literal["uniform", "learned"] = "uniform"
    backward_logits: np.ndarray | None = None

    def copy(self) -> FlowParams:
        return replace(
            self,
            forward_logits=self.forward_logits.copy(),
            log_state_flow=self.log_state_flow.copy(),
            backward_logits=None if self.backward_logits is None else self.backward_logits.copy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "log_Z": np.array(self.log_Z, dtype=float),
            "forward_logits": self.forward_logits,
            "log_state_flow": self.log_state_flow,
        }
        if self.backward_logits is not None:
            out["backward_logits"] = self.backward_logits
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


@dataclass
class SampleConfig:
    epsilon: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def init_params(
    env: DAGEnv,
    scheme: Literal["zeros", "normal"] = "zeros",
    backward_mode: Literal["uniform", "learned"] = "uniform",
    rng: np.random.Generator | None = None,
    scale: float = 1.0,
) -> FlowParams:
    """``"zeros"`` gives the uniform forward policy with unit flows everywhere."""
    n, a = env.n_states, env.n_actions
    parent_cols = env.parent_index.shape[1]
    if scheme == "zeros":
        logits, flows, log_z = np.zeros((n, a)), np.zeros(n), 0.0
        back = np.zeros((n, parent_cols)) if backward_mode == "learned" else None
    elif scheme == "normal":
        rng = np.random.default_rng() if rng is None else rng
        logits = scale * rng.standard_normal((n, a))
        flows = scale * rng.standard_normal(n)
        log_z = float(scale * rng.standard_normal())
        back = scale * rng.standard_normal((n, parent_cols)) if backward_mode == "learned" else None
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return FlowParams(log_z, logits, flows, backward_mode, back)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the ``True`` entries; masked entries get ``-inf``."""
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_log_probs(params: FlowParams, env: DAGEnv, states=None) -> np.ndarray:
    if states is None:
        return masked_log_softmax(params.forward_logits, env.action_mask)
    return masked_log_softmax(params.forward_logits[states], env.action_mask[states])


def backward_log_probs(params: FlowParams, env: DAGEnv, states=None) -> np.ndarray:
    """Log ``P_B`` over parent slots; rows without parents are all ``-inf``."""
    mask = env.parent_mask if states is None else env.parent_mask[states]
    if params.backward_mode == "uniform":
        return env.uniform_log_pb if states is None else env.uniform_log_pb[states]
    logits = params.backward_logits if states is None else params.backward_logits[states]
    with np.errstate(invalid="ignore"):
        return masked_log_softmax(logits, mask)


def forward_policy(params: FlowParams, env: DAGEnv, s: int) -> np.ndarray:
    """Probabilities over ``env.children(s)``, in the same order."""
    logp = forward_log_probs(params, env, np.array([s]))[0]
    return np.exp(logp[env.action_mask[s]])


def backward_policy(params: FlowParams, env: DAGEnv, s: int) -> np.ndarray:
    """Probabilities over ``env.parents(s)``, in the same order."""
    if env.n_parents[s] == 0:
        raise ValueError(f"state {s} has no parents")
    logp = backward_log_probs(params, env, np.array([s]))[0]
    return np.exp(logp[env.parent_mask[s]])


def state_log_flow(params: FlowParams, env: DAGEnv, s) -> float | np.ndarray:
    """Log flow through ``s``; the source is tied to ``log_Z``."""
    out = np.where(np.asarray(s) == env.source, params.log_Z, params.log_state_flow[s])
    return float(out) if out.ndim == 0 else out


def trajectory_streams(
    seed: int, step: int, count: int, stream: int = SAMPLE_STREAM, sub: int = 0
) -> list[np.random.Generator]:
    """Independent Philox-4x64 streams, one per slot.

    The key is ``(seed, stream)`` and slot ``b`` starts from counter
    ``(0, sub, b, step)``.  A draw therefore depends only on
    ``(seed, stream, sub, step, b)``, never on how many other slots exist or
    the order they are consumed in.  Each slot may take up to ``2**66``
    doubles before running into the next counter word.
    """
    key = [seed & 0xFFFFFFFFFFFFFFFF, stream]
    return [np.random.Generator(np.random.Philox(key=key, counter=[0, sub, b, step])) for b in range(count)]


class PhiloxStreams:
    """Uniform draws identical to :func:`trajectory_streams`, from one reused bit generator.

    Rewinding a single Philox instance to each slot's counter is several times
    cheaper than constructing a generator per slot.
    """

    def __init__(self, seed: int, stream: int = SAMPLE_STREAM):
        self._bg = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream])
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state

    def uniforms(self, step: int, count: int, width: int, sub: int = 0) -> np.ndarray:
        out = np.empty((count, width))
        st = self._state
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        for b in range(count):
            st["state"]["counter"] = np.array([0, sub, b, step], dtype=np.uint64)
            self._bg.state = st
            out[b] = self._gen.random(width)
        return out


@dataclass
class TrajectoryBatch:
    """Padded arrays for a batch of complete trajectories.

    Row ``b`` holds states ``s_0..s_n`` in ``states[b, :n+1]`` and the matching
    ``n + 1`` actions (terminate last).  Padding repeats the final state and
    uses action ``-1``.
    """

    states: np.ndarray
    actions: np.ndarray
    lengths: np.ndarray
    log_pf: np.ndarray = field(default=None)
    log_pb: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def terminals(self) -> np.ndarray:
        return self.states[np.arange(self.size), self.lengths]

    @property
    def valid(self) -> np.ndarray:
        """Mask of real transitions, terminate included."""
        return self.actions >= 0

    def trajectories(self) -> list[Trajectory]:
        out = []
        for b, n in enumerate(self.lengths):
            out.append(Trajectory(
                self.states[b, :n + 1].copy(),
                self.actions[b, :n + 1].copy(),
                None if self.log_pf is None else self.log_pf[b, :n + 1].copy(),
                None if self.log_pb is None else self.log_pb[b, :n].copy(),
            ))
        return out

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> TrajectoryBatch:
        if len(trajs) == 0:
            raise ValueError("empty batch")
        lengths = np.array([t.n for t in trajs], dtype=np.int64)
        width = int(lengths.max()) + 1
        states = np.empty((len(trajs), width), dtype=np.int64)
        actions = np.full((len(trajs), width), -1, dtype=np.int64)
        for b, t in enumerate(trajs):
            states[b, :t.n + 1] = t.states
            states[b, t.n + 1:] = t.states[-1]
            actions[b, :t.n + 1] = t.actions
        return cls(states, actions, lengths)


def sample_batch(
    params: FlowParams,
    env: DAGEnv,
    rngs: Sequence[np.random.Generator] = (),
    epsilon: float = 0.0,
    start: int | None = None,
    uniforms: np.ndarray | None = None,
) -> TrajectoryBatch:
    """Roll out one trajectory per generator (or per row of ``uniforms``).

    Each trajectory consumes exactly ``env.max_length`` uniforms from its own
    generator, one per potential transition, so draws are independent of the
    batch composition.  Actions come from ``(1 - eps) * P_F + eps * uniform``;
    the cached ``log_pf`` is the un-mixed policy.
    """
    if uniforms is None:
        uniforms = np.stack([g.random(env.max_length) for g in rngs]) if len(rngs) else np.empty((0, env.max_length))
    u = uniforms
    B, T = u.shape[0], env.max_length
    N, stop = env.n_states, env.terminate_action
    # an extra absorbing row N receives finished trajectories
    nxt_tab = env.absorbing_child_index
    whole = N * env.n_actions <= FULL_TABLE_LIMIT
    if whole:
        logp_tab, cdf_tab = _policy_tables(params.forward_logits, env.action_mask, epsilon)
        logp_tab = np.vstack([logp_tab, np.zeros((1, env.n_actions))])
        cdf_tab = np.vstack([cdf_tab, np.ones((1, env.n_actions))])
        if N * env.n_actions <= SCALAR_TABLE_LIMIT:
            # small tables: plain Python loops beat per-step array calls
            states, actions, lengths = _scalar_rollouts(cdf_tab, nxt_tab, u, env.source if start is None else start, N)
            pad = actions < 0
            log_pf = np.where(pad, 0.0, logp_tab[states, np.maximum(actions, 0)])
            batch = TrajectoryBatch(states, actions, lengths, log_pf)
            batch.log_pb = transition_log_pb(params, env, batch)
            return batch
    cur = np.full(B, env.source if start is None else start, dtype=np.int64)
    states = np.empty((B, T + 1), dtype=np.int64)
    actions = np.empty((B, T + 1), dtype=np.int64)
    log_pf = None if whole else np.zeros((B, T + 1))
    t = 0
    while t < T + 1:
        states[:, t] = cur
        if (cur == N).all():
            break
        if whole:
            cdf = cdf_tab[cur]
        else:
            logp, cdf = _policy_tables(params.forward_logits[cur % N], env.action_mask[cur % N], epsilon)
            logp[cur == N], cdf[cur == N] = 0.0, 1.0
        a = (cdf <= u[:, t:t + 1]).sum(axis=1)
        actions[:, t] = a
        if not whole:
            log_pf[:, t] = logp[np.arange(B), a]
        cur = nxt_tab[cur, a]
        t += 1
    if t > T:
        raise RuntimeError(f"trajectory exceeded {T} transitions; environment tables are inconsistent")
    width = max(t, 1)
    states, actions = states[:, :width], actions[:, :width]
    log_pf = logp_tab[states, actions] if whole else log_pf[:, :width]
    lengths = np.argmax(actions == stop, axis=1) if B else np.zeros(0, dtype=np.int64)
    pad = np.arange(width)[None, :] > lengths[:, None]
    actions[pad] = -1
    log_pf[pad] = 0.0
    states = np.where(pad, states[np.arange(B), lengths][:, None], states)
    batch = TrajectoryBatch(states, actions, lengths, log_pf)
    batch.log_pb = transition_log_pb(params, env, batch)
    return batch


def _scalar_rollouts(cdf_tab, nxt_tab, u, start, sink):
    """Same draws as the array loop in :func:`sample_batch`, one trajectory at a time.

    ``bisect_right`` on a cdf row counts the entries ``<= x``, exactly like
    ``(cdf <= x).sum()``.
    """
    cdf, nxt = cdf_tab.tolist(), nxt_tab.tolist()
    paths, moves = [], []
    for row in u.tolist():
        cur, path, acts = start, [start], []
        for x in row:
            a = bisect_right(cdf[cur], x)
            acts.append(a)
            cur = nxt[cur][a]
            if cur == sink:
                break
            path.append(cur)
        else:
            raise RuntimeError(f"trajectory exceeded {len(row)} transitions; environment tables are inconsistent")
        paths.append(path)
        moves.append(acts)
    width = max((len(p) for p in paths), default=1)
    states = np.array([p + p[-1:] * (width - len(p)) for p in paths], dtype=np.int64).reshape(len(paths), width)
    actions = np.array([a + [-1] * (width - len(a)) for a in moves], dtype=np.int64).reshape(len(paths), width)
    lengths = np.array([len(p) - 1 for p in paths], dtype=np.int64)
    return states, actions, lengths


def _policy_tables(logits, mask, epsilon):
    logp = masked_log_softmax(logits, mask)
    p = np.exp(logp)
    if epsilon > 0:
        p = (1 - epsilon) * p + epsilon * mask / mask.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    cdf[..., -1] = 1.0
    return logp, cdf


def transition_log_pb(params: FlowParams, env: DAGEnv, batch: TrajectoryBatch) -> np.ndarray:
    """``log P_B(s_t | s_{t+1})`` per transition; zero on terminate and padding."""
    B, W = batch.states.shape
    move = np.arange(W)[None, :] < batch.lengths[:, None]
    nxt = np.empty_like(batch.states)
    nxt[:, :-1] = batch.states[:, 1:]
    nxt[:, -1] = batch.states[:, -1]
    slot = np.where(move, batch.actions, 0)
    if params.backward_mode == "uniform":
        vals = env.uniform_log_pb[nxt, slot]
    else:
        vals = backward_log_probs(params, env, nxt.ravel())[np.arange(nxt.size), slot.ravel()].reshape(B, W)
    return np.where(move, vals, 0.0)


def sample_trajectory(params: FlowParams, env: DAGEnv, cfg: SampleConfig, rng: np.random.Generator) -> Trajectory:
    return sample_batch(params, env, [rng], cfg.epsilon).trajectories()[0]


def save_params(path, params: FlowParams, env) -> None:
    """Write a ``.npz`` checkpoint.

    Keys: ``header`` (JSON string with the environment fingerprint and
    ``backward_mode``), ``log_Z`` (0-d), ``forward_logits`` (N x A),
    ``log_state_flow`` (N,) and, for a learned backward policy,
    ``backward_logits``.
    """
    header = dict(getattr(env, "fingerprint", {}), backward_mode=params.backward_mode, format=1)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **params.arrays())


def load_params(path, env=None) -> FlowParams:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if env is not None:
            want = getattr(env, "fingerprint", {})
            got = {k: header.get(k) for k in want}
            if got != want:
                raise ConfigError(f"checkpoint was written for {got}, not {want}")
        back = data["backward_logits"].copy() if "backward_logits" in data else None
        return FlowParams(
            float(data["log_Z"]),
            data["forward_logits"].copy(),
            data["log_state_flow"].copy(),
            header["backward_mode"],
            back,
        )
