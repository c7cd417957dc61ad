"""Behavioral tests for the three normalization schemes."""

import numpy as np
import pytest

from fedsupnet import norm


class TestPNForward:
    def test_hand_evaluated_rms(self):
        # per-channel values [3, 4]: RMS = sqrt(12.5) = 3.535534
        x = np.array([3.0, 4.0]).reshape(2, 1, 1, 1)
        y = norm.pn_forward(x, np.zeros(1), np.ones(1), np.zeros(1), eps=0.0, train=True)
        np.testing.assert_allclose(y.ravel(), [0.848528, 1.131371], atol=1e-6)

    def test_zero_input_outputs_beta(self):
        x = np.zeros((2, 3, 4, 4))
        beta = np.array([1.0, -2.0, 0.5])
        y = norm.pn_forward(x, np.zeros(3), np.ones(3), beta, train=True)
        np.testing.assert_allclose(y, np.broadcast_to(beta[None, :, None, None], y.shape))

    def test_perfect_offset_outputs_beta(self):
        alpha = np.array([0.7, -1.3])
        x = np.broadcast_to(alpha[None, :, None, None], (2, 2, 3, 3)).copy()
        beta = np.array([2.0, 3.0])
        y = norm.pn_forward(x, alpha, np.ones(2), beta, train=True)
        np.testing.assert_allclose(y, np.broadcast_to(beta[None, :, None, None], y.shape))

    def test_rejects_too_many_channels(self):
        state = norm.PNState.create(2)
        with pytest.raises(ValueError):
            state.forward(np.zeros((1, 3, 2, 2), dtype=np.float32), c=3)

    def test_eval_is_per_sample(self):
        rng = np.random.default_rng(0)
        state = norm.PNState.create(3, dtype=np.float64)
        state.alpha[:] = rng.normal(size=3) * 0.1
        a = rng.normal(size=(1, 3, 4, 4))
        b = rng.normal(size=(5, 3, 4, 4))
        alone = state.forward(a, train=False)
        batch = np.concatenate([a, b])
        together = state.forward(batch, train=False)[:1]
        np.testing.assert_array_equal(alone, together)

    def test_train_mode_uses_batch_statistics(self):
        rng = np.random.default_rng(1)
        state = norm.PNState.create(2, dtype=np.float64)
        a = rng.normal(size=(1, 2, 3, 3))
        b = rng.normal(size=(3, 2, 3, 3)) * 5.0
        alone = state.forward(a, train=True)
        together = state.forward(np.concatenate([a, b]), train=True)[:1]
        assert not np.allclose(alone, together)

    def test_width_shared_consistency(self):
        rng = np.random.default_rng(2)
        state = norm.PNState.create(8, dtype=np.float64)
        state.alpha[:] = rng.normal(size=8) * 0.2
        state.gamma[:] = rng.uniform(0.5, 1.5, size=8)
        x = rng.normal(size=(2, 8, 4, 4))
        full = state.forward(x, train=True)
        narrow = norm.pn_forward(x[:, :5], state.alpha[:5], state.gamma[:5],
                                 state.beta[:5], train=True)
        np.testing.assert_array_equal(full[:, :5], narrow)


class TestPNState:
    def test_serialization_unchanged_by_eval(self):
        rng = np.random.default_rng(3)
        state = norm.PNState.create(4)
        before = state.serialize()
        for _ in range(50):
            state.forward(rng.normal(size=(2, 4, 3, 3)).astype(np.float32), train=False)
        assert state.serialize() == before

    def test_zero_grad_out(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 4, 4))
        gx, ga, gg, gb = norm.pn_backward(
            np.zeros_like(x), x, np.zeros(3), np.ones(3), np.zeros(3))
        for g in (gx, ga, gg, gb):
            assert np.all(g == 0)

    def test_gamma_grad_identity(self):
        # gradient of gamma equals sum over positions of gout * xhat
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4, 4))
        alpha = rng.normal(size=3) * 0.1
        gout = rng.normal(size=x.shape)
        _, _, gg, _ = norm.pn_backward(gout, x, alpha, np.ones(3), np.zeros(3))
        z = x - alpha[None, :, None, None]
        rms = np.sqrt((z * z).mean(axis=(0, 2, 3), keepdims=True))
        xhat = z / (rms + norm.DEFAULT_EPS)
        np.testing.assert_allclose(gg, (gout * xhat).sum(axis=(0, 2, 3)), rtol=1e-10)


class TestStaticBatchNorm:
    def test_standardizes_batch(self):
        rng = np.random.default_rng(6)
        x = rng.normal(3.0, 2.0, size=(8, 3, 5, 5))
        y = norm.sbn_forward(x, np.ones(3), np.zeros(3), train=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_eval_depends_on_query_batch(self):
        # the batch dependence parametric normalization removes
        rng = np.random.default_rng(7)
        state = norm.SBNState.create(2, dtype=np.float64)
        a = rng.normal(size=(1, 2, 4, 4))
        ctx1 = rng.normal(size=(3, 2, 4, 4))
        ctx2 = rng.normal(size=(3, 2, 4, 4)) + 4.0
        in1 = state.forward(np.concatenate([a, ctx1]), train=False)[:1]
        in2 = state.forward(np.concatenate([a, ctx2]), train=False)[:1]
        assert not np.allclose(in1, in2)

    def test_already_standardized_is_identity(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(64, 2, 8, 8))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y = norm.sbn_forward(x, np.ones(2), np.zeros(2), train=True)
        np.testing.assert_allclose(y, x, atol=1e-4)

    def test_rejects_singleton_batch_at_train(self):
        with pytest.raises(ValueError):
            norm.sbn_forward(np.zeros((1, 2, 3, 3)), np.ones(2), np.zeros(2), train=True)


class TestBatchNorm:
    def test_running_stats_updated_at_train_only(self):
        rng = np.random.default_rng(9)
        state = norm.BNState.create(3, dtype=np.float64)
        x = rng.normal(2.0, 1.5, size=(16, 3, 4, 4))
        state.forward(x, train=True)
        rm = state.running_mean.copy()
        assert not np.allclose(rm, 0.0)
        state.forward(x, train=False)
        np.testing.assert_array_equal(state.running_mean, rm)

    def test_eval_uses_running_stats(self):
        state = norm.BNState.create(1, dtype=np.float64)
        state.running_mean[:] = 1.0
        state.running_var[:] = 4.0
        x = np.full((2, 1, 2, 2), 3.0)
        y = state.forward(x, train=False)
        np.testing.assert_allclose(y, (3.0 - 1.0) / np.sqrt(4.0 + state.eps))
