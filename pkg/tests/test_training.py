import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnhar.data import TimeSeriesDataset
from attnhar.errors import ConfigError, DataError, NumericError
from attnhar.model import HarModel, ModelConfig, model_from_bytes
from attnhar.ndcore import Rng
from attnhar.training import (OptimState, TrainConfig, end_epoch, gradcheck, linear_model_factory,
                              relative_error, rmsprop_step, tiny_model_factory, train)


def step(g, p=0.0, **kw):
    state = OptimState(**kw)
    params = {"w": np.array([p])}
    rmsprop_step(state, params, {"w": np.array([g])})
    return params["w"][0], state


class TestRmsprop:
    def test_zero_gradient_no_change(self):
        p, state = step(0.0, p=1.5)
        assert p == 1.5 and state.v["w"][0] == 0.0

    def test_first_step(self):
        p, state = step(1.0)
        assert state.v["w"][0] == pytest.approx(0.1, abs=1e-15)
        # 0.001 / (sqrt(0.1) + 1e-8)
        assert -p == pytest.approx(0.0031623, abs=1e-7)

    def test_scale_invariance(self):
        small, _ = step(1.0)
        big, _ = step(1000.0)
        assert abs(big - small) / abs(small) < 1e-3

    def test_matches_reference_over_steps(self):
        rng = Rng(0)
        grads = rng.normal((20, 3))
        params = {"w": np.zeros(3)}
        state = OptimState(lr=0.01)
        v, w = np.zeros(3), np.zeros(3)
        for g in grads:
            rmsprop_step(state, params, {"w": g.copy()})
            v = 0.9 * v + 0.1 * g ** 2
            w = w - 0.01 * g / (np.sqrt(v) + 1e-8)
        assert np.allclose(params["w"], w, atol=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
    def test_v_nonnegative_and_bounded(self, gs):
        state = OptimState()
        params = {"w": np.zeros(1)}
        for g in gs:
            rmsprop_step(state, params, {"w": np.array([g])})
            assert 0.0 <= state.v["w"][0] <= max(x * x for x in gs) * (1 + 1e-12)

    def test_decay_schedule(self):
        state = OptimState(lr=0.001, lr_decay=0.98)
        seen = []
        for _ in range(3):
            seen.append(state.lr)
            end_epoch(state)
        assert seen == pytest.approx([0.001, 0.00098, 0.0009604], abs=1e-15)
        for _ in range(7):
            end_epoch(state)
        assert state.lr == pytest.approx(0.001 * 0.98 ** 10, rel=1e-12)

    def test_decay_example(self):
        state = OptimState(lr=0.001, lr_decay=0.9)
        end_epoch(state)
        assert state.lr == pytest.approx(0.0009, abs=1e-15)
        end_epoch(state)
        assert state.lr == pytest.approx(0.00081, abs=1e-15)

    def test_non_finite_gradient_named(self):
        with pytest.raises(NumericError, match="conv0.kernel"):
            rmsprop_step(OptimState(), {"conv0.kernel": np.zeros(2)},
                         {"conv0.kernel": np.array([1.0, np.inf])}, "(epoch 1, batch 0)")

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(lr=-1.0), dict(alpha=1.0)])
    def test_bad_hyperparameters(self, kw):
        with pytest.raises(ConfigError):
            OptimState(**kw)


def separable(n=480, seed=0):
    """Two classes with opposite constant offsets on both channels."""
    labels = (np.arange(n) // 96) % 2
    x = np.where(labels[:, None] == 1, 1.0, -1.0) + 0.1 * Rng(seed).normal((n, 2))
    return TimeSeriesDataset(x, labels, ["a", "b"])


def small_model(seed=0, variant="attention"):
    return HarModel(ModelConfig(n_channels=2, n_classes=2, variant=variant, n_filters=8, hidden=16,
                                dropout=0.1), seed=seed)


class TestTrain:
    def test_separable_converges(self):
        res = train(small_model(), separable(2400), None,
                    TrainConfig(epochs=5, batch_size=10, lr=0.003, seed=0))
        losses = [r["train_loss"] for r in res.log]
        assert losses[-1] < 0.1
        assert losses[-1] < losses[0]

    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, batch_size=8, lr=0.005, seed=4)
        a = train(small_model(4), separable(), separable(seed=1), cfg)
        b = train(small_model(4), separable(), separable(seed=1), cfg)
        assert a.best_checkpoint == b.best_checkpoint
        assert a.log_lines() == b.log_lines()
        assert "seconds" not in a.log_lines()

    def test_seed_changes_run(self):
        a = train(small_model(0), separable(), None, TrainConfig(epochs=1, batch_size=8, seed=0))
        b = train(small_model(0), separable(), None, TrainConfig(epochs=1, batch_size=8, seed=1))
        assert a.best_checkpoint != b.best_checkpoint

    def test_zero_epochs_returns_initial_model(self):
        m = small_model(2)
        before = {k: v.copy() for k, v in m.parameters().items()}
        res = train(m, separable(), separable(seed=1), TrainConfig(epochs=0))
        assert res.log == [] and res.best_epoch == 0
        restored, header = model_from_bytes(res.best_checkpoint)
        assert header["epoch"] == 0
        for k, v in restored.parameters().items():
            assert np.array_equal(v, before[k])

    def test_log_schema(self):
        res = train(small_model(), separable(), separable(seed=1),
                    TrainConfig(epochs=2, batch_size=16, log_timing=True))
        recs = [json.loads(line) for line in res.log_lines().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2]
        assert recs[0]["lr"] == 0.001 and recs[1]["lr"] == pytest.approx(0.00098)
        assert all(set(r) == {"epoch", "lr", "train_loss", "val_meanF1", "seconds"} for r in recs)

    def test_early_stopping(self):
        # lr so small that validation F1 cannot move past its first value
        res = train(small_model(), separable(), separable(seed=1),
                    TrainConfig(epochs=30, batch_size=100, lr=1e-12, patience=2))
        assert len(res.log) == 3 and res.best_epoch == 1

    def test_empty_dataset(self):
        empty = TimeSeriesDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), ["a", "b"])
        with pytest.raises(DataError):
            train(small_model(), empty, None, TrainConfig())

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(epochs=-1)])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestGradcheck:
    def test_linear_model_tight(self):
        report = gradcheck(linear_model_factory(0), tolerance=1e-6)
        assert report.passed, report.lines()

    @pytest.mark.parametrize("variant", ["baseline", "attention"])
    @pytest.mark.parametrize("seed", [1, 2])
    def test_full_model(self, variant, seed):
        report = gradcheck(tiny_model_factory(variant, seed), tolerance=1e-4)
        assert report.passed, report.lines()

    def test_zero_parameter_model(self):
        class Empty:
            def parameters(self):
                return {}

        with pytest.raises(ConfigError):
            gradcheck(lambda: (Empty(), None, None))

    def test_detects_wrong_gradient(self):
        make = linear_model_factory(1)

        def broken():
            model, x, y = make()
            orig = model.backward
            model.backward = lambda cache, g: {k: 1.1 * v for k, v in orig(cache, g).items()}
            return model, x, y

        assert not gradcheck(broken, tolerance=1e-6).passed

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(1), np.array([1e-11])) <= 1e-6
        assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
