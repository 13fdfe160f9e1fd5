import numpy as np
import pytest

from harmony.exceptions import DimensionError, TrainingError
from harmony.indicators import WindowSet
from harmony.training import (
    SGD,
    TrainConfig,
    backward,
    gate_from_accuracies,
    load_checkpoint,
    loss_and_grad,
    mse_loss,
    model_forward,
    pinball_loss,
    save_checkpoint,
    train,
    validate_90_90,
)


def toy_batch(seed=0, b=2, n=3, f=2, t_in=8):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((b, n, t_in)), rng.standard_normal((b, f, t_in)),
            rng.standard_normal((b, n)), rng.standard_normal((b, n)))


def loss_at(params, x, tf, y, levels, eps):
    z, _ = model_forward(params, x, tf, levels, eps)
    return mse_loss(z, y)


def finite_difference(params, x, tf, y, levels, eps, h=1e-4):
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            up = loss_at(params, x, tf, y, levels, eps)
            value[idx] = orig - h
            down = loss_at(params, x, tf, y, levels, eps)
            value[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


class TestLosses:
    def test_mse_examples(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert mse_loss([1.0, 0.0], [0.0, 2.0]) == 2.5

    def test_mse_length_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss([1.0], [1.0, 2.0])

    def test_pinball(self):
        assert pinball_loss([0.0], [1.0], 0.9) == pytest.approx(0.9)
        assert pinball_loss([1.0], [0.0], 0.9) == pytest.approx(0.1)


class TestGradients:
    def test_matches_finite_differences(self, toy_model):
        params, levels, _ = toy_model
        x, tf, y, eps = toy_batch()
        _, grads, _ = loss_and_grad(params, x, tf, y, levels, eps, TrainConfig())
        fd = finite_difference(params, x, tf, y, levels, eps)
        for name in params:
            assert relative_error(grads[name], fd[name]) < 1e-3, name

    def test_zero_upstream_gives_zero_gradients(self, toy_model):
        params, levels, _ = toy_model
        x, tf, _, eps = toy_batch()
        z, cache = model_forward(params, x, tf, levels, eps)
        grads = backward(params, cache, np.zeros_like(z))
        assert all(not g.any() for g in grads.values())

    def test_small_sgd_step_descends(self, toy_model):
        params, levels, config = toy_model
        x, tf, y, eps = toy_batch(b=1)
        before, grads, _ = loss_and_grad(params, x, tf, y, levels, eps, config)
        stepped = {k: v.copy() for k, v in params.items()}
        SGD(1e-5).step(stepped, grads)
        assert loss_at(stepped, x, tf, y, levels, eps) < before


def windows_from(values, t_in):
    """Window set over a ``(N, T)`` array split 7:1:2 by target index."""
    n, t = values.shape
    targets = np.arange(t_in, t)
    idx = (targets - t_in)[:, None] + np.arange(t_in)
    tags = np.where(targets < 0.7 * t, "train", np.where(targets < 0.8 * t, "test", "validation"))
    return WindowSet(np.transpose(values[:, idx], (1, 0, 2)), values[:, targets].T.copy(),
                     np.zeros((targets.size, 0, t_in)), targets, tags.astype(object))


class TestTrain:
    def test_defaults(self):
        config = TrainConfig()
        assert (config.learning_rate, config.batch_size, config.epochs) == (0.001, 128, 20)
        assert (config.n_blocks, config.n_flows, config.d_model) == (2, 2, 32)

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"batch_size": 0}, {"epochs": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_constant_target_fit(self):
        windows = windows_from(np.full((2, 200), 0.4), 6)
        _, log = train(windows, [1, 2], TrainConfig(d_model=8, epochs=20, batch_size=16, learning_rate=0.01))
        assert min(log.val_mse) < 1e-3

    def test_log_and_selection(self):
        windows = windows_from(np.sin(np.arange(300) / 10)[None].repeat(2, 0) * 0.5 + 0.5, 5)
        _, log = train(windows, [1, 2], TrainConfig(d_model=8, epochs=4, batch_size=32))
        assert log.epochs == [1, 2, 3, 4]
        assert log.val_mse[log.best_epoch - 1] == min(log.val_mse)

    def test_seeded_determinism(self):
        windows = windows_from(np.random.default_rng(0).random((2, 120)), 4)
        config = TrainConfig(d_model=8, epochs=2, batch_size=16, seed=3)
        a, _ = train(windows, [1, 1], config)
        b, _ = train(windows, [1, 1], config)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_divergence_names_epoch(self):
        values = np.random.default_rng(0).random((2, 60))
        windows = windows_from(values, 4)
        windows.targets[0, 0] = np.nan
        with pytest.raises(TrainingError) as info:
            train(windows, [1, 1], TrainConfig(d_model=8, epochs=2))
        assert info.value.epoch == 1

    def test_log_csv(self, tmp_path):
        windows = windows_from(np.random.default_rng(0).random((2, 80)), 4)
        _, log = train(windows, [1, 1], TrainConfig(d_model=8, epochs=3))
        log.to_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_mse,val_mse" and len(lines) == 4


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, toy_model, tmp_path):
        params, _, _ = toy_model
        save_checkpoint(tmp_path / "a.ckpt", params, {"t_in": 8, "note": "x"})
        loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
        assert meta == {"t_in": 8, "note": "x"}
        save_checkpoint(tmp_path / "b.ckpt", loaded, meta)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert all(np.array_equal(params[k], loaded[k]) for k in params)


class _Fixed:
    def __init__(self, offset=0.0):
        self.offset = offset

    def predict(self, X, time_features=None):
        return X[:, :, -1] + self.offset


class TestGate:
    def windows(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(1, 2, (50, 3, 4))
        splits = np.array(["validation"] * 50, object)
        return WindowSet(x, x[:, :, -1].copy(), np.zeros((50, 0, 4)), np.arange(50), splits)

    def test_perfect_model_passes(self):
        result = validate_90_90(_Fixed(), self.windows())
        assert result.passed and result.fraction == 1.0

    def test_offset_model_fails(self):
        assert not validate_90_90(_Fixed(0.5), self.windows()).passed

    def test_boundary(self):
        above = np.full(1000, 0.95)
        above[:101] = 0.5  # 89.9% above threshold
        assert not gate_from_accuracies(above).passed
        above[100] = 0.95  # exactly 90.0%
        result = gate_from_accuracies(above)
        assert result.passed and result.fraction == 0.9

    def test_accuracy_must_exceed_threshold(self):
        assert gate_from_accuracies(np.full(10, 0.9)).fraction == 0.0

    def test_configurable_thresholds(self):
        assert gate_from_accuracies(np.full(10, 0.85), 0.8, 1.0).passed

    def test_empty(self):
        with pytest.raises(ValueError):
            gate_from_accuracies([])
