"""Gradient checks, Adam, and the training loop with periodic exact evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .env import ConfigError, DAGEnv
from .exact import empirical_distribution, l1_distance, modes_found, terminating_distribution, true_distribution
from .losses import EntropyCache, LossSpec, NumericalError, loss_and_grad
from .model import FlowParams, PhiloxStreams, init_params, sample_batch, save_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 8
    lr_policy: float = 1e-3
    lr_logz_flow: float = 1e-1
    seed: int = 0
    eval_every: int = 250
    loss: LossSpec = field(default_factory=LossSpec)
    epsilon: float = 0.0
    empirical_window: int = 0
    record_time: bool = False
    checkpoint: str | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0; batch_size and eval_every >= 1")
        if not (self.lr_policy > 0 and self.lr_logz_flow > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")


@dataclass
class OptState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: FlowParams) -> OptState:
        arrays = params.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


@dataclass
class MetricsRow:
    step: int
    loss_value: float
    l1_exact: float
    l1_empirical: float | None
    log_z: float
    mean_entropy: float | None
    modes_found: int
    elapsed_ms: float | None = None


def compute_gradients(params: FlowParams, env: DAGEnv, batch, spec: LossSpec, cache: EntropyCache | None = None):
    """Loss value and exact gradient; raises ``NumericalError`` naming a non-finite entry."""
    value, grads = loss_and_grad(params, env, batch, spec, cache)
    for name, g in grads.arrays().items():
        bad = np.flatnonzero(~np.isfinite(np.ravel(g)))
        if len(bad):
            raise NumericalError(f"non-finite gradient in {name} at flat index {int(bad[0])}")
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    return value, grads


def grad_check(params: FlowParams, env: DAGEnv, batch, spec: LossSpec, h: float = 1e-5, cache: EntropyCache | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Only entries with an analytic gradient above ``1e-10`` in magnitude are
    compared; entropy weights in ``cache`` are held fixed.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-7, 1e-3]")
    if spec.kind == "subgfn" and cache is None:
        cache = EntropyCache(env, spec)
    if cache is not None:
        cache.fill_missing(params, np.arange(env.n_states))
    _, grads = loss_and_grad(params, env, batch, spec, cache)

    def f(p):
        return loss_and_grad(p, env, batch, spec, cache, need_grad=False)[0]

    worst = 0.0
    analytic = grads.arrays()
    for name, base in params.arrays().items():
        g = np.ravel(analytic[name])
        for i in np.flatnonzero(np.abs(g) > 1e-10):
            plus, minus = params.copy(), params.copy()
            _nudge(plus, name, i, h)
            _nudge(minus, name, i, -h)
            fd = (f(plus) - f(minus)) / (2 * h)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i])))
    return worst


def _nudge(params: FlowParams, name: str, i: int, h: float) -> None:
    if name == "log_Z":
        params.log_Z += h
    else:
        getattr(params, name).flat[i] += h


def adam_step(params: FlowParams, grads: FlowParams, opt: OptState, cfg: TrainConfig) -> tuple[FlowParams, OptState]:
    """Bias-corrected Adam, updating ``params`` and ``opt`` in place.

    Policy logits use ``lr_policy``; ``log_Z`` and log state flows use
    ``lr_logz_flow``.
    """
    opt.t += 1
    c1 = 1 - opt.beta1**opt.t
    c2 = 1 - opt.beta2**opt.t
    g_all = grads.arrays()
    new = {}
    for name, value in params.arrays().items():
        g = g_all[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        lr = cfg.lr_policy if name in ("forward_logits", "backward_logits") else cfg.lr_logz_flow
        step = lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite Adam update for {name}")
        new[name] = value - step
    params.log_Z = float(new["log_Z"])
    params.forward_logits = new["forward_logits"]
    params.log_state_flow = new["log_state_flow"]
    if "backward_logits" in new:
        params.backward_logits = new["backward_logits"]
    return params, opt


class _Window:
    """Ring buffer of the most recent terminal states."""

    def __init__(self, size: int):
        self.buf = np.empty(size, dtype=np.int64)
        self.filled = 0
        self.pos = 0

    def push(self, xs: np.ndarray) -> None:
        size = len(self.buf)
        for x in xs[-size:]:
            self.buf[self.pos] = x
            self.pos = (self.pos + 1) % size
        self.filled = min(size, self.filled + len(xs))

    def values(self) -> np.ndarray:
        return self.buf[:self.filled]


def evaluate(
    params: FlowParams,
    env: DAGEnv,
    cfg: TrainConfig | None,
    step: int,
    loss_value: float = float("nan"),
    cache: EntropyCache | None = None,
    visited: np.ndarray | None = None,
    window: np.ndarray | None = None,
) -> MetricsRow:
    """Snapshot of exact L1 to the target, ``log Z``, mean cached entropy and modes.

    ``visited`` holds terminal-state counts accumulated so far; ``window`` the
    recent terminals used for the sample-based L1.
    """
    target = true_distribution(env)
    l1 = l1_distance(terminating_distribution(params, env), target)
    l1_emp = None
    if window is not None and len(window):
        l1_emp = l1_distance(empirical_distribution(window, env), target)
    modes = 0 if visited is None else modes_found(env, np.flatnonzero(visited))
    return MetricsRow(
        step=step,
        loss_value=float(loss_value),
        l1_exact=l1,
        l1_empirical=l1_emp,
        log_z=float(params.log_Z),
        mean_entropy=None if cache is None else cache.mean(),
        modes_found=modes,
    )


def train_run(env: DAGEnv, cfg: TrainConfig, params: FlowParams | None = None) -> tuple[FlowParams, list[MetricsRow]]:
    """Sample, (re)weight, differentiate, update; evaluate every ``eval_every`` steps.

    Rows are emitted at multiples of ``eval_every`` and at the final step.  The
    run is a pure function of ``(env, cfg, params)`` unless
    ``cfg.record_time`` is set.  On a numerical failure the last good
    parameters are written to ``cfg.checkpoint`` (when set) before re-raising.
    """
    params = init_params(env) if params is None else params.copy()
    opt = OptState.zeros_like(params)
    spec = cfg.loss
    cache = EntropyCache(env, spec, cfg.seed) if spec.kind == "subgfn" else None
    visited = np.zeros(env.n_states, dtype=np.int64)
    window = _Window(cfg.empirical_window) if cfg.empirical_window > 0 else None
    streams = PhiloxStreams(cfg.seed)
    rows: list[MetricsRow] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        u = streams.uniforms(step, cfg.batch_size, env.max_length)
        batch = sample_batch(params, env, epsilon=cfg.epsilon, uniforms=u)
        if cache is not None:
            cache.update(params, batch.states[batch.valid], step)
        try:
            value, grads = compute_gradients(params, env, batch, spec, cache)
            # adam_step validates every update before touching params
            adam_step(params, grads, opt, cfg)
        except NumericalError:
            if cfg.checkpoint:
                save_params(cfg.checkpoint, params, env)
                log.error("numerical failure at step %d; last good parameters saved to %s", step, cfg.checkpoint)
            raise
        terminals = batch.terminals
        np.add.at(visited, terminals, 1)
        if window is not None:
            window.push(terminals)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row = evaluate(params, env, cfg, step, value, cache, visited, None if window is None else window.values())
            if cfg.record_time:
                row.elapsed_ms = (time.perf_counter() - t0) * 1e3
            rows.append(row)
            log.debug("step %d loss %.4g l1 %.4f", step, value, row.l1_exact)
    return params, rows
