import numpy as np
import pytest

from subgfn.env import ConfigError, HyperGrid
from subgfn.exact import exact_flows, params_from_flows
from subgfn.losses import LossSpec, NumericalError
from subgfn.model import init_params, load_params
from subgfn.trainer import OptState, TrainConfig, _Window, adam_step, evaluate, grad_check, train_run

from conftest import random_batch, random_params


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_policy=0)
    with pytest.raises(ConfigError):
        TrainConfig(epsilon=2)


def test_grad_check_step_range(grid22):
    p = init_params(grid22)
    with pytest.raises(ValueError):
        grad_check(p, grid22, random_batch(p, grid22, 0), LossSpec("tb"), h=1e-2)


def test_adam_first_step_moves_by_lr(grid22):
    p = init_params(grid22)
    g = p.copy()
    g.log_Z = 3.0
    g.forward_logits[:] = -2.0
    g.log_state_flow[:] = 0.0
    cfg = TrainConfig(lr_policy=1e-3, lr_logz_flow=0.1)
    adam_step(p, g, OptState.zeros_like(p), cfg)
    # bias-corrected Adam: the first step is lr * sign(g)
    assert p.log_Z == pytest.approx(-0.1, rel=1e-6)
    assert np.allclose(p.forward_logits, 1e-3, rtol=1e-5)
    assert np.all(p.log_state_flow == 0.0)


def test_adam_rejects_nonfinite_without_mutating(grid22):
    p = init_params(grid22)
    g = p.copy()
    g.forward_logits[1, 1] = np.nan
    before = p.copy()
    with pytest.raises(NumericalError):
        adam_step(p, g, OptState.zeros_like(p), TrainConfig())
    assert np.array_equal(p.forward_logits, before.forward_logits) and p.log_Z == before.log_Z


def test_window_keeps_latest():
    w = _Window(3)
    w.push(np.array([1, 2]))
    w.push(np.array([3, 4, 5, 6]))
    assert sorted(w.values()) == [4, 5, 6]


def test_evaluate_at_optimum(grid28):
    p = params_from_flows(grid28, exact_flows(grid28))
    row = evaluate(p, grid28, None, 0)
    assert row.l1_exact < 1e-12
    assert row.log_z == pytest.approx(np.log(grid28.reward_table.sum()))


def test_train_run_rows_and_determinism():
    env = HyperGrid(2, 4)
    cfg = TrainConfig(steps=120, eval_every=50, loss=LossSpec("subgfn"), empirical_window=64)
    _, a = train_run(env, cfg)
    _, b = train_run(env, cfg)
    assert [r.step for r in a] == [50, 100, 120]
    assert a == b
    assert all(r.elapsed_ms is None and r.mean_entropy is not None for r in a)


def test_train_run_does_not_touch_input(grid23):
    p = random_params(grid23, 0)
    before = p.copy()
    train_run(grid23, TrainConfig(steps=5, loss=LossSpec("db")), p)
    assert np.array_equal(p.forward_logits, before.forward_logits)


@pytest.mark.parametrize("kind", ["tb", "subtb", "subgfn", "fm", "db"])
def test_short_training_reduces_l1(kind):
    env = HyperGrid(2, 4)
    _, rows = train_run(env, TrainConfig(steps=1500, eval_every=1500, loss=LossSpec(kind), seed=1))
    start = evaluate(init_params(env), env, None, 0).l1_exact
    assert rows[-1].l1_exact < start


def test_numerical_failure_writes_checkpoint(tmp_path, monkeypatch):
    import subgfn.trainer as trainer

    env = HyperGrid(2, 3)
    calls = {"n": 0}
    real = trainer.compute_gradients

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 4:
            raise NumericalError("injected")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer, "compute_gradients", flaky)
    path = tmp_path / "last.npz"
    with pytest.raises(NumericalError):
        train_run(env, TrainConfig(steps=10, checkpoint=str(path)))
    saved = load_params(path, env)
    assert saved.all_finite()
    assert not np.array_equal(saved.forward_logits, init_params(env).forward_logits)
