import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgfn.env import ConfigError, HyperGrid, Trajectory
from subgfn.exact import brute_force_flows, entropy, enumerate_trajectories, exact_flows, params_from_flows
from subgfn.losses import (
    LOSS_KINDS,
    EntropyCache,
    LossSpec,
    NumericalError,
    SubRoot,
    batch_loss,
    db_loss,
    db_residual,
    extract_subroots,
    fm_loss,
    fm_residual,
    loss_and_grad,
    stack_trajectories,
    subgfn_batch_loss,
    subgfn_suffix_loss,
    subnet_entropy,
    subtb_loss,
    tb_loss,
)
from subgfn.model import init_params
from subgfn.trainer import grad_check

from conftest import random_batch, random_params

LN2SQ = np.log(2) ** 2


def traj(env, coords):
    """Trajectory through the given grid points, terminating at the last one."""
    states = [env.index(c) for c in coords]
    actions = [int(np.flatnonzero(np.subtract(b, a))[0]) for a, b in zip(coords, coords[1:])]
    return Trajectory(states, actions + [env.terminate_action])


def test_loss_spec_validation():
    with pytest.raises(ConfigError):
        LossSpec(kind="xx")
    with pytest.raises(ConfigError):
        LossSpec(delta=-1)
    with pytest.raises(ConfigError):
        LossSpec(lam=0)
    with pytest.raises(ConfigError):
        LossSpec(entropy_refresh=0)


def test_fm_residual_examples():
    assert fm_residual(1.0, 0.5, 0.5, 0.0) == 0.0
    assert fm_residual(1.0, 1.0, 1.0, 0.0) == pytest.approx(LN2SQ)
    assert fm_residual(0.0, 0.0, 0.0, 1e-6) == 0.0
    with pytest.raises(NumericalError):
        fm_residual(0.0, 0.0, 0.0, 0.0)


def test_db_residual_examples():
    assert db_residual(0.3, 0.3) == 0.0
    assert db_residual(0.6, 0.3) == pytest.approx(LN2SQ)
    assert db_residual(0.2, 0.1) == pytest.approx(LN2SQ)
    with pytest.raises(NumericalError):
        db_residual(0.0, 0.3, 0.0)


def test_tb_hand_example(grid22):
    t = traj(grid22, [(0, 0), (0, 1)])
    assert tb_loss(init_params(grid22), grid22, t) == pytest.approx(np.log(5 / 3) ** 2)


def test_suffix_hand_example(grid22):
    t = traj(grid22, [(0, 0), (0, 1), (1, 1)])
    p = init_params(grid22)
    assert subgfn_suffix_loss(p, grid22, t, SubRoot(grid22.index((0, 1)), 1)) == pytest.approx(np.log(10) ** 2)
    assert subgfn_suffix_loss(p, grid22, t, 0) == pytest.approx(tb_loss(p, grid22, t))
    with pytest.raises(ValueError):
        subgfn_suffix_loss(p, grid22, t, SubRoot(grid22.index((1, 0)), 1))


def test_doubling_z_at_optimum(grid23):
    p = params_from_flows(grid23, exact_flows(grid23))
    t = traj(grid23, [(0, 0), (1, 0), (1, 1)])
    assert tb_loss(p, grid23, t) < 1e-18
    p.log_Z += np.log(2)
    assert tb_loss(p, grid23, t) == pytest.approx(LN2SQ)


def test_extract_subroots(grid22):
    t = traj(grid22, [(0, 0), (0, 1), (1, 1)])
    assert extract_subroots(grid22, t) == [SubRoot(0, 0), SubRoot(grid22.index((0, 1)), 1)]
    assert extract_subroots(grid22, Trajectory([0], [2])) == [SubRoot(0, 0)]
    env = HyperGrid(2, 8)
    t = traj(env, [(0, 0)] + [(k, 0) for k in range(1, 8)] + [(7, k) for k in range(1, 8)])
    assert [r.position for r in extract_subroots(env, t)] == list(range(t.n))


def test_subtb_reductions(grid22):
    p = random_params(grid22, 0)
    one = Trajectory([0], [2])
    assert subtb_loss(p, grid22, one, lam=1.0) == pytest.approx(tb_loss(p, grid22, one))
    # as lambda -> 0 only single edges count: the mean of DB residuals along the path
    t = traj(grid22, [(0, 0), (0, 1), (1, 1)])
    edges = list(zip(t.states, t.actions))
    db_mean = np.mean([db_loss(p, grid22, e, delta=0.0) for e in edges])
    assert subtb_loss(p, grid22, t, lam=1e-9) == pytest.approx(db_mean, rel=1e-6)


def test_subnet_entropy_examples(grid22):
    p = init_params(grid22)
    assert subnet_entropy(p, grid22, grid22.index((0, 1))) == pytest.approx(np.log(2))
    assert subnet_entropy(p, grid22, 0) == pytest.approx(2 / 3 * np.log(3) + 1 / 3 * np.log(6))
    p.forward_logits[0, 2] = 1e3
    assert subnet_entropy(p, grid22, 0) == pytest.approx(0.0, abs=1e-12)


def test_subnet_entropy_mc_close(grid22):
    p = init_params(grid22)
    est = subnet_entropy(p, grid22, 0, "mc", m=10_000, rng=np.random.default_rng(0))
    assert abs(est - subnet_entropy(p, grid22, 0)) < 0.05


def test_entropy_cache_refresh_schedule(grid23):
    spec = LossSpec("subgfn", entropy_refresh=10)
    cache = EntropyCache(grid23, spec)
    p = init_params(grid23)
    cache.update(p, [0, 1, 8], step=1)
    # the far corner has a single child and is never cached
    assert np.isnan(cache.values[8]) and cache.stamp[0] == 1
    assert list(cache.due([0, 1], 5)) == []
    assert list(cache.due([0, 1], 11)) == [0, 1]


def test_entropy_cache_mc_matches_dp_roughly(grid23):
    p = random_params(grid23, 2)
    dp = EntropyCache(grid23, LossSpec("subgfn"))
    mc = EntropyCache(grid23, LossSpec("subgfn", entropy_mode="mc", mc_rollouts=4000))
    dp.update(p, range(9), 0)
    mc.update(p, range(9), 0)
    assert np.nanmax(np.abs(dp.values - mc.values)) < 0.1


def test_subgfn_batch_combination(grid22):
    p = init_params(grid22)
    t = traj(grid22, [(0, 0), (0, 1), (1, 1)])
    cache = EntropyCache(grid22)
    got = subgfn_batch_loss(p, grid22, [t], cache)
    h0, h1 = 2 / 3 * np.log(3) + 1 / 3 * np.log(6), np.log(2)
    l0, l1 = tb_loss(p, grid22, t), np.log(10) ** 2
    assert got == pytest.approx((h0 * l0 + h1 * l1) / (h0 + h1))


def test_subgfn_equal_and_zero_weights(grid22):
    p = random_params(grid22, 3)
    t = traj(grid22, [(0, 0), (0, 1), (1, 1)])
    roots = extract_subroots(grid22, t)
    mean = np.mean([subgfn_suffix_loss(p, grid22, t, r) for r in roots])
    for fill in (0.7, 0.0):
        cache = EntropyCache(grid22)
        cache.values[:] = fill
        cache.stamp[:] = 0
        assert subgfn_batch_loss(p, grid22, [t], cache) == pytest.approx(mean)


def test_batch_forms(grid22):
    p = random_params(grid22, 4)
    trajs = enumerate_trajectories(grid22)
    t = trajs[2]
    assert batch_loss(p, grid22, [t], LossSpec("tb")) == pytest.approx(tb_loss(p, grid22, t))
    # FM over a batch that visits every state averages the per-state losses
    fm = batch_loss(p, grid22, trajs, LossSpec("fm"))
    assert fm == pytest.approx(np.mean([fm_loss(p, grid22, s) for s in range(4)]))
    edges = {(int(s), int(a)) for tr in trajs for s, a in zip(tr.states, tr.actions)}
    db = batch_loss(p, grid22, trajs, LossSpec("db"))
    assert db == pytest.approx(np.mean([db_loss(p, grid22, e) for e in edges]))
    with pytest.raises(ValueError):
        db_loss(p, grid22, (3, 0))


@pytest.mark.parametrize("H", [2, 3, 8])
@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_zero_at_optimum(H, kind):
    env = HyperGrid(2, H)
    table = brute_force_flows(env) if H < 8 else exact_flows(env)
    p = params_from_flows(env, table)
    batch = random_batch(p, env, 0, 16)
    value, grads = loss_and_grad(p, env, batch, LossSpec(kind), EntropyCache(env))
    assert 0 <= value < 1e-9
    assert max(np.abs(g).max() for g in grads.arrays().values()) < 1e-6


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(LOSS_KINDS), st.integers(2, 3), st.integers(0, 10_000), st.sampled_from(["uniform", "learned"]))
def test_gradients_match_finite_differences(kind, H, seed, mode):
    env = HyperGrid(2, H)
    p = random_params(env, seed, mode)
    batch = random_batch(p, env, seed + 1)
    assert grad_check(p, env, batch, LossSpec(kind)) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(LOSS_KINDS), st.integers(0, 10_000))
def test_losses_nonnegative(kind, seed):
    env = HyperGrid(2, 4)
    p = random_params(env, seed)
    assert batch_loss(p, env, random_batch(p, env, seed), LossSpec(kind), EntropyCache(env)) >= 0


def test_stack_trajectories_round_trip(grid23):
    trajs = enumerate_trajectories(grid23)[:5]
    back = stack_trajectories(trajs).trajectories()
    for a, b in zip(trajs, back):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    with pytest.raises(ValueError):
        stack_trajectories([])
