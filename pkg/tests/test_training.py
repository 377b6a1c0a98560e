import json
import math

import numpy as np
import pytest

from slipfuse.features import FeatureSet
from slipfuse.model import ModelConfig, ShapeMismatch, forward_batch, init_model, load_checkpoint
from slipfuse.training import (
    Adam,
    ClassImbalanceError,
    DivergenceError,
    TrainConfig,
    adam_step,
    compute_loss,
    fit_normalization,
    train,
    train_step,
)


def toy_set(n=40, L=4, dim=6, seed=0, shift=1.5):
    """Separable toy windows: slip sequences drift upward over time."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, L, dim)).astype(np.float32)
    X += (y[:, None, None] * shift * np.linspace(0, 1, L)[None, :, None]).astype(np.float32)
    return FeatureSet(X, y.astype(np.int64), [f"t{i // 5}" for i in range(n)], [0] * n)


# ---------------------------------------------------------------------------
# loss


def test_loss_examples():
    assert compute_loss(np.array([[0.0, 1.0]]), np.array([1])) == 0.0
    assert compute_loss(np.array([[0.5, 0.5]]), np.array([0])) == pytest.approx(math.log(2))
    two = compute_loss(np.array([[0.9, 0.1], [0.9, 0.1]]), np.array([0, 1]))
    assert two == pytest.approx((-math.log(0.9) - math.log(0.1)) / 2)
    assert two == pytest.approx(1.2040, abs=5e-5)
    assert compute_loss(np.array([[1.0, 0.0]]), np.array([1])) == pytest.approx(-math.log(1e-12))


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        compute_loss(np.ones((3, 2)) / 2, np.array([0, 1]))


# ---------------------------------------------------------------------------
# Adam


def scalar_adam(theta, grads, lr=5e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_first_step_scalar():
    p = {"w": np.zeros(1)}
    adam_step(p, {"w": np.ones(1)}, {}, 1, TrainConfig())
    # quoted to six figures; the exact value is -5e-4 / (1 + 1e-8)
    assert p["w"][0] == pytest.approx(-4.99999e-4, abs=1e-9)
    assert p["w"][0] == pytest.approx(-5e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    moments = {}
    for t in range(1, 4):
        adam_step(p, {"w": np.zeros(2)}, moments, t, TrainConfig())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_unit_step():
    p = {"w": np.zeros(1)}
    moments, cfg = {}, TrainConfig()
    prev = 0.0
    for t in range(1, 1001):
        adam_step(p, {"w": np.array([0.37])}, moments, t, cfg)
        step = prev - p["w"][0]
        prev = p["w"][0]
    assert step == pytest.approx(cfg.learning_rate, rel=0.01)


def test_adam_matches_scalar_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(20, 3))
    p = {"w": np.array([0.1, 0.2, -0.3])}
    moments = {}
    for t, g in enumerate(grads, start=1):
        adam_step(p, {"w": g.copy()}, moments, t, TrainConfig())
    expect = [scalar_adam(th, grads[:, j]) for j, th in enumerate([0.1, 0.2, -0.3])]
    np.testing.assert_allclose(p["w"], expect, rtol=1e-12)


def test_adam_errors():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 1, TrainConfig())
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, {}, 0, TrainConfig())


def test_registry_holds_only_head_parameters():
    state = init_model(ModelConfig(input_dim=6, seq_len=4), 0)
    opt = Adam(state.parameter_names(), TrainConfig())
    assert set(opt.registry) == {"fc.W", "fc.b", "cls.W", "cls.b"} | {
        f"lstm{k}.{p}" for k in (0, 1) for p in ("Wx", "Wh", "b")
    }
    # normalisation statistics are buffers, never optimised
    assert not any(n.startswith("norm") for n in opt.registry)
    with pytest.raises(KeyError):
        opt.step(state.params, {"backbone.conv1": np.zeros(1)})


# ---------------------------------------------------------------------------
# training loop


def test_loss_decreases_first_five_steps():
    data = toy_set(16)
    state = init_model(ModelConfig(input_dim=6, seq_len=4), 0)
    state.set_normalization(*fit_normalization(data.X))
    opt = Adam(state.parameter_names(), TrainConfig())
    losses = [compute_loss(forward_batch(state, data.X)[0], data.y)]
    for _ in range(5):
        train_step(state, opt, data.X, data.y, training=False)
        losses.append(compute_loss(forward_batch(state, data.X)[0], data.y))
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_train_is_deterministic_and_logs(tmp_path):
    data, val = toy_set(40), toy_set(20, seed=1)
    cfg = ModelConfig(input_dim=6, seq_len=4)
    tc = TrainConfig(batch_size=8, max_epochs=4, seed=3)
    s1, r1 = train(cfg, tc, data, val, tmp_path / "a")
    s2, r2 = train(cfg, tc, data, val, tmp_path / "b")
    assert r1.losses == r2.losses
    assert all(np.array_equal(s1.params[k], s2.params[k]) for k in s1.params)
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3, 4]
    summary = json.loads((tmp_path / "a" / "train_summary.json").read_text())
    assert summary["n_epochs"] == 4 and summary["best_epoch"] == r1.best_epoch
    best = load_checkpoint(tmp_path / "a" / "best.ckpt")
    assert all(np.array_equal(best.params[k], s1.params[k]) for k in s1.params)
    best_val = max(e.val_accuracy for e in r1.epochs)
    assert r1.best_val_accuracy == best_val
    assert r1.epochs[r1.best_epoch - 1].val_accuracy == best_val


def test_early_stopping():
    data = toy_set(20)
    # a constant validation score stops after `patience` stale epochs
    val = FeatureSet(data.X[:4], np.array([1, 1, 1, 1]), ["v"] * 4, [0] * 4)
    _, rep = train(ModelConfig(6, 4), TrainConfig(batch_size=20, max_epochs=50, early_stop_patience=3,
                                                  learning_rate=1e-6), data, val)
    assert rep.stopped_early and len(rep.epochs) == 4


def test_class_checks():
    data = toy_set(10)
    only_slip = FeatureSet(data.X, np.ones(10, np.int64), data.trial_ids, data.offsets)
    with pytest.raises(ClassImbalanceError):
        train(ModelConfig(6, 4), TrainConfig(max_epochs=1), only_slip)
    lopsided = FeatureSet(data.X, np.array([1] * 8 + [0] * 2), data.trial_ids, data.offsets)
    with pytest.warns(UserWarning, match="60/40"):
        train(ModelConfig(6, 4), TrainConfig(max_epochs=1), lopsided)


def test_divergence_reported():
    data = toy_set(10)
    data.X[0, 0, 0] = np.inf
    with pytest.raises(DivergenceError, match="step 1"):
        train(ModelConfig(6, 4), TrainConfig(max_epochs=1), data)


def test_window_shape_checked():
    with pytest.raises(ShapeMismatch):
        train(ModelConfig(6, 5), TrainConfig(max_epochs=1), toy_set(10))
