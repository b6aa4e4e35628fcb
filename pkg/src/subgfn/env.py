"""Finite-DAG environments and the hypergrid benchmark.

States are addressed by a dense ordinal index.  Every environment exposes
precomputed integer tables so that samplers, losses and dynamic programs can
work on whole batches with numpy fancy indexing:

* ``child_index[s, a]``: successor of ``s`` under action ``a`` (``-1`` when the
  action is illegal).  The last action column is always *terminate*; its entry
  is ``s`` itself, because a terminating state and its sink share one index.
* ``parent_index[s, k]``: the parent ``p`` with ``child_index[p, k] == s``
  (``-1`` when there is none), so parent slots line up with actions.
* ``log_reward[s]``: log of the (strictly positive) terminal reward.

Index order must be a topological order of the DAG: every parent has a smaller
index than each of its children.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal, NamedTuple

import numpy as np

DEFAULT_STATE_CAP = 2**24


class ConfigError(ValueError):
    """Invalid environment or run configuration."""


class BudgetError(RuntimeError):
    """A requested enumeration exceeds its configured budget."""


class TrajectoryViolation(NamedTuple):
    kind: Literal["bad-start", "illegal-step", "missing-terminate", "early-terminate"]
    position: int
    message: str


@dataclass
class Trajectory:
    """A complete trajectory ``s_0 -> ... -> s_n -> sink``.

    ``actions`` has ``n + 1`` entries, the last being the terminate action.
    ``log_pf[t]`` is the log forward probability of transition ``t`` under the
    policy that sampled it, and ``log_pb[t]`` the log backward probability
    ``P_B(s_t | s_{t+1})`` for ``t < n`` (the terminate edge carries no
    backward term).
    """

    states: np.ndarray
    actions: np.ndarray
    log_pf: np.ndarray | None = None
    log_pb: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.states) - 1

    @property
    def terminal(self) -> int:
        return int(self.states[-1])


class DAGEnv:
    """Contract shared by all environments.

    Subclasses fill in ``n_states``, ``n_actions``, ``source`` and the three
    tables described in the module docstring.
    """

    n_states: int
    n_actions: int
    source: int = 0

    @property
    def terminate_action(self) -> int:
        return self.n_actions - 1

    @cached_property
    def action_mask(self) -> np.ndarray:
        return self.child_index >= 0

    @cached_property
    def parent_mask(self) -> np.ndarray:
        return self.parent_index >= 0

    @cached_property
    def n_children(self) -> np.ndarray:
        return self.action_mask.sum(axis=1)

    @cached_property
    def n_parents(self) -> np.ndarray:
        return self.parent_mask.sum(axis=1)

    @cached_property
    def uniform_log_pb(self) -> np.ndarray:
        """Log of the uniform backward policy over parent slots (``-inf`` off-mask)."""
        npar = np.maximum(self.n_parents, 1)[:, None]
        return np.where(self.parent_mask, -np.log(npar), -np.inf)

    @cached_property
    def absorbing_child_index(self) -> np.ndarray:
        """``child_index`` plus an absorbing row ``n_states`` that terminate and illegal moves never leave."""
        n = self.n_states
        out = np.vstack([np.where(self.action_mask, self.child_index, n), np.full((1, self.n_actions), n)])
        out[:n, -1] = n
        return out

    @cached_property
    def reward_table(self) -> np.ndarray:
        return np.exp(self.log_reward)

    @cached_property
    def branching(self) -> np.ndarray:
        return self.n_children >= 2

    @cached_property
    def depth(self) -> np.ndarray:
        """Longest-path distance from the source."""
        depth = np.zeros(self.n_states, dtype=np.int64)
        for s in range(self.n_states):
            kids = self.child_index[s, :-1]
            kids = kids[kids >= 0]
            depth[kids] = np.maximum(depth[kids], depth[s] + 1)
        return depth

    @cached_property
    def max_length(self) -> int:
        """Upper bound on the number of transitions, terminate included."""
        return int(self.depth.max()) + 1

    @cached_property
    def level_moves(self) -> list[list[tuple[int, np.ndarray, np.ndarray]]]:
        """Per depth level, ``(action, sources, targets)`` for every move action.

        Within one entry the targets are distinct, so they can be updated with
        plain fancy indexing.
        """
        out = []
        for lvl in self.levels:
            moves = []
            for a in range(self.n_actions - 1):
                src = lvl[self.action_mask[lvl, a]]
                if len(src):
                    moves.append((a, src, self.child_index[src, a]))
            out.append(moves)
        return out

    @cached_property
    def levels(self) -> list[np.ndarray]:
        """State indices grouped by depth from the source, in increasing depth."""
        depth = self.depth
        order = np.argsort(depth, kind="stable")
        bounds = np.searchsorted(depth[order], np.arange(depth.max() + 2))
        return [order[bounds[k]:bounds[k + 1]] for k in range(len(bounds) - 1)]

    def children(self, s: int) -> list[tuple[int, int | None]]:
        """``(action, successor)`` pairs; ``None`` marks the sink."""
        out = []
        for a in np.flatnonzero(self.action_mask[s]):
            a = int(a)
            out.append((a, None if a == self.terminate_action else int(self.child_index[s, a])))
        return out

    def parents(self, s: int) -> list[tuple[int, int]]:
        """``(parent, action)`` pairs where ``action`` leads from parent to ``s``."""
        return [(int(self.parent_index[s, k]), int(k)) for k in np.flatnonzero(self.parent_mask[s])]

    def reward(self, s: int) -> float:
        return float(self.reward_table[s])

    def is_branching(self, s: int) -> bool:
        return bool(self.branching[s])

    def descendants(self, s: int) -> np.ndarray:
        """Sorted indices of all states reachable from ``s`` (``s`` included)."""
        seen = np.zeros(self.n_states, dtype=bool)
        seen[s] = True
        for t in range(s, self.n_states):
            if seen[t]:
                kids = self.child_index[t, :-1]
                seen[kids[kids >= 0]] = True
        return np.flatnonzero(seen)

    def validate_trajectory(self, traj: Trajectory) -> TrajectoryViolation | None:
        """Return the first violation found, or ``None`` for a valid trajectory."""
        states, actions = traj.states, traj.actions
        if len(states) == 0 or states[0] != self.source:
            return TrajectoryViolation("bad-start", 0, "trajectory does not start at the source")
        stop = self.terminate_action
        for t in range(len(states) - 1):
            s, s_next = int(states[t]), int(states[t + 1])
            if t >= len(actions):
                # no recorded action: accept any legal non-terminal move
                if s_next not in self.child_index[s, :-1]:
                    return TrajectoryViolation("illegal-step", t, f"{s} -> {s_next} is not an edge")
                continue
            a = int(actions[t])
            if a == stop:
                return TrajectoryViolation("early-terminate", t, "terminate before the last state")
            if not (0 <= a < stop) or self.child_index[s, a] != s_next:
                return TrajectoryViolation("illegal-step", t, f"{s} -> {s_next} is not an edge")
        if len(actions) != len(states) or int(actions[-1]) != stop:
            return TrajectoryViolation("missing-terminate", len(states) - 1, "trajectory must end with terminate")
        return None


@dataclass(frozen=True)
class HyperGrid(DAGEnv):
    """``D``-dimensional grid of side ``H``; actions increment one coordinate.

    The reward has a plateau of ``0.5`` where every coordinate lies in the outer
    band and an extra ``2`` where every coordinate lies in the inner band, on
    top of the baseline ``R0``.  ``interval_closure="open"`` uses open bands
    (0.25, 0.5) and (0.3, 0.4); ``"half-open"`` closes the outer band on the
    right, (0.25, 0.5], which also rewards the grid faces.
    """

    D: int
    H: int
    R0: float = 0.1
    interval_closure: Literal["open", "half-open"] = "open"
    state_cap: int = DEFAULT_STATE_CAP

    def __post_init__(self):
        if int(self.D) != self.D or self.D < 1:
            raise ConfigError(f"D must be a positive integer, got {self.D}")
        if int(self.H) != self.H or self.H < 2:
            raise ConfigError(f"H must be an integer >= 2, got {self.H}")
        if not self.R0 > 0:
            raise ConfigError(f"R0 must be positive, got {self.R0}")
        if self.interval_closure not in ("open", "half-open"):
            raise ConfigError(f"unknown interval_closure {self.interval_closure!r}")

    @property
    def n_states(self) -> int:
        return self.H**self.D

    @property
    def n_actions(self) -> int:
        return self.D + 1

    @property
    def source(self) -> int:
        return 0

    @cached_property
    def strides(self) -> np.ndarray:
        return self.H ** np.arange(self.D, dtype=np.int64)

    def check_budget(self, cap: int | None = None) -> None:
        cap = self.state_cap if cap is None else cap
        if self.n_states > cap:
            raise BudgetError(f"hypergrid {self.H}^{self.D} = {self.n_states} states exceeds cap {cap}")

    def index(self, coords) -> int | np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        out = coords @ self.strides
        return int(out) if out.ndim == 0 else out

    def coords_of(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        return (index[..., None] // self.strides) % self.H

    @cached_property
    def coords(self) -> np.ndarray:
        """``(H**D, D)`` coordinates in index order."""
        self.check_budget()
        return self.coords_of(np.arange(self.n_states, dtype=np.int64))

    @cached_property
    def depth(self) -> np.ndarray:
        return self.coords.sum(axis=1)

    @cached_property
    def max_length(self) -> int:
        return self.D * (self.H - 1) + 1

    def enumerate_states(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates in index order and a topological visiting order.

        The visiting order is nondecreasing in coordinate sum.
        """
        order = np.argsort(self.depth, kind="stable")
        return self.coords, order

    @cached_property
    def child_index(self) -> np.ndarray:
        idx = np.arange(self.n_states, dtype=np.int64)
        out = np.empty((self.n_states, self.n_actions), dtype=np.int64)
        out[:, :-1] = np.where(self.coords < self.H - 1, idx[:, None] + self.strides, -1)
        out[:, -1] = idx
        return out

    @cached_property
    def parent_index(self) -> np.ndarray:
        idx = np.arange(self.n_states, dtype=np.int64)
        return np.where(self.coords > 0, idx[:, None] - self.strides, -1)

    @cached_property
    def log_reward(self) -> np.ndarray:
        return np.log(self.reward_of(self.coords))

    def reward_of(self, coords) -> np.ndarray | float:
        """Reward evaluated directly from coordinates, with exact band tests.

        With ``a = |2 s - (H - 1)|`` the normalised offset is
        ``a / (2 (H - 1))``; comparing integers avoids float edge effects.
        """
        coords = np.asarray(coords, dtype=np.int64)
        m = self.H - 1
        a = np.abs(2 * coords - m)
        outer_hi = (a <= m) if self.interval_closure == "half-open" else (a < m)
        outer = (2 * a > m) & outer_hi
        inner = (5 * a > 3 * m) & (5 * a < 4 * m)
        r = self.R0 + 0.5 * outer.all(axis=-1) + 2.0 * inner.all(axis=-1)
        return float(r) if np.ndim(r) == 0 else r

    def state(self, s) -> tuple[int, ...]:
        return tuple(int(c) for c in self.coords_of(s))

    def descendants(self, s: int) -> np.ndarray:
        lo = self.coords_of(s)
        axes = [np.arange(c, self.H, dtype=np.int64) * st for c, st in zip(lo, self.strides)]
        grid = np.zeros(1, dtype=np.int64)
        for ax in axes:
            grid = (grid[:, None] + ax[None, :]).ravel()
        return np.sort(grid)

    def n_descendants(self, s) -> np.ndarray | int:
        out = np.prod(self.H - self.coords_of(s), axis=-1)
        return int(out) if np.ndim(out) == 0 else out

    @property
    def fingerprint(self) -> dict:
        return {"D": self.D, "H": self.H, "R0": self.R0, "interval_closure": self.interval_closure}


def hypergrid_new(D: int, H: int, R0: float = 0.1, **kwargs) -> HyperGrid:
    return HyperGrid(D, H, R0, **kwargs)
