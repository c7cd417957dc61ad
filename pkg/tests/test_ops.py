"""Unit tests for the numeric layer operations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsupnet import ops


class TestConvForward:
    def test_ones_3x3_same_padding(self):
        # corners see 4 inputs, edges 6, center 9
        x = np.ones((1, 1, 4, 4), dtype=np.float64)
        w = np.ones((1, 1, 3, 3), dtype=np.float64)
        out = ops.conv2d_forward(x, w, stride=1, padding=1)
        assert out.shape == (1, 1, 4, 4)
        assert out[0, 0, 0, 0] == 4.0
        assert out[0, 0, 0, 1] == 6.0
        assert out[0, 0, 1, 1] == 9.0

    def test_zero_weight_zero_output(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        w = np.zeros((4, 3, 3, 3), dtype=np.float32)
        out = ops.conv2d_forward(x, w, stride=1, padding=1)
        assert np.all(out == 0.0)

    def test_depthwise_counts_neighborhood(self):
        x = np.ones((1, 2, 2, 2), dtype=np.float64)
        w = np.ones((2, 1, 3, 3), dtype=np.float64)
        out = ops.conv2d_forward(x, w, stride=1, padding=1, groups=2)
        # every position of a 2x2 map has exactly 4 in-bounds neighbours
        assert np.all(out == 4.0)

    def test_output_shape_ceil_division(self):
        x = np.zeros((1, 2, 7, 7), dtype=np.float32)
        w = np.zeros((3, 2, 3, 3), dtype=np.float32)
        out = ops.conv2d_forward(x, w, stride=2, padding=1)
        assert out.shape == (1, 3, 4, 4)  # ceil(7/2) == 4

    def test_rejects_bad_shapes(self):
        x = np.zeros((1, 3, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError):
            ops.conv2d_forward(x, np.zeros((2, 4, 3, 3), dtype=np.float32), padding=1)
        with pytest.raises(ValueError):
            ops.conv2d_forward(x, np.zeros((2, 3, 4, 4), dtype=np.float32), padding=1)
        with pytest.raises(ValueError):  # padding must be (k-1)/2
            ops.conv2d_forward(x, np.zeros((2, 3, 3, 3), dtype=np.float32), padding=0)
        with pytest.raises(ValueError):  # groups must divide channels
            ops.conv2d_forward(x, np.zeros((2, 1, 3, 3), dtype=np.float32),
                               padding=1, groups=2)


def conv_oracle(x, w, stride, padding, groups):
    """Direct nested-loop convolution, accumulated in (c_in, kh, kw) order."""
    n, c_in, h, win = x.shape
    c_out, cg, k, _ = w.shape
    ho = -(-h // stride)
    wo = -(-win // stride)
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    og = c_out // groups
    for b in range(n):
        for co in range(c_out):
            g = co // og
            for i_out in range(ho):
                for j_out in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for ki in range(k):
                            for kj in range(k):
                                src_i = i_out * stride + ki - padding
                                src_j = j_out * stride + kj - padding
                                if 0 <= src_i < h and 0 <= src_j < win:
                                    acc += x[b, g * cg + ci, src_i, src_j] * w[co, ci, ki, kj]
                    out[b, co, i_out, j_out] = acc
    return out


class TestConvOracle:
    @pytest.mark.parametrize("seed", range(6))
    def test_bitwise_against_direct_summation_f64(self, seed):
        rng = np.random.default_rng(seed)
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        h = int(rng.integers(max(k, 3), 9))
        x = rng.normal(size=(2, c_in, h, h))
        w = rng.normal(size=(c_out, c_in, k, k))
        got = ops.conv2d_forward(x, w, stride=stride, padding=(k - 1) // 2)
        want = conv_oracle(x, w, stride, (k - 1) // 2, 1)
        assert got.dtype == np.float64
        assert np.array_equal(got, want)

    @pytest.mark.parametrize("seed", range(3))
    def test_depthwise_matches_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        c = int(rng.integers(1, 5))
        x = rng.normal(size=(2, c, 6, 6))
        w = rng.normal(size=(c, 1, 3, 3))
        got = ops.conv2d_forward(x, w, stride=1, padding=1, groups=c)
        want = conv_oracle(x, w, 1, 1, c)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_f32_path_close_to_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        got = ops.conv2d_forward(x, w, stride=2, padding=1)
        want = conv_oracle(x.astype(np.float64), w.astype(np.float64), 2, 1, 1)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


class TestConvBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        out = ops.conv2d_forward(x, w, stride=1, padding=1)
        gx, gw = ops.conv2d_backward(np.zeros_like(out), x, w, stride=1, padding=1)
        assert np.all(gx == 0) and np.all(gw == 0)

    def test_rejects_mismatched_grad(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        w = np.zeros((2, 2, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            ops.conv2d_backward(np.zeros((1, 2, 3, 3), dtype=np.float32), x, w,
                                stride=1, padding=1)


class TestLinear:
    def test_small_example(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
        b = np.zeros(2)
        x = np.array([[1.0, 1.0]])
        np.testing.assert_array_equal(ops.linear_forward(x, w, b), [[3.0, 7.0]])

    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = ops.linear_forward(x, np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(out, x)

    def test_rowwise_matches_plain(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 7)).astype(np.float32)
        w = rng.normal(size=(3, 7)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        np.testing.assert_allclose(
            ops.linear_forward_rowwise(x, w, b), ops.linear_forward(x, w, b),
            rtol=1e-6, atol=1e-6,
        )

    def test_rejects_mismatch(self):
        with pytest.raises(ValueError):
            ops.linear_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))


class TestReluPool:
    def test_relu_values(self):
        np.testing.assert_array_equal(
            ops.relu_forward(np.array([-1.0, 2.0])), [0.0, 2.0]
        )

    def test_pool_constant_map(self):
        x = np.full((2, 3, 4, 4), 2.5, dtype=np.float32)
        np.testing.assert_allclose(ops.global_avg_pool_forward(x), 2.5)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = ops.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)
        np.testing.assert_allclose(grad, [[-0.5, 0.5]])

    def test_confident_correct_is_near_zero(self):
        logits = np.array([[50.0, -50.0]])
        loss, _ = ops.softmax_cross_entropy(logits, np.array([0]))
        assert loss < 1e-12

    def test_smoothing_noop_on_uniform_predictions(self):
        loss, _ = ops.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]),
                                            label_smoothing=0.1)
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)

    def test_rejects_out_of_range_labels(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(np.zeros((1, 3)), np.array([-1]))

    @given(st.floats(-50, 50), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_shift_invariance(self, shift, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(3, 5))
        labels = rng.integers(0, 5, size=3)
        base, _ = ops.softmax_cross_entropy(logits, labels, label_smoothing=0.05)
        moved, _ = ops.softmax_cross_entropy(logits + shift, labels, label_smoothing=0.05)
        assert abs(base - moved) < 1e-12 * max(1.0, abs(base))


class TestKLDistill:
    def test_equal_logits_zero(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(4, 6))
        loss, grad = ops.kl_distill_loss(t, t.copy(), temperature=2.0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_onehot_teacher_uniform_student(self):
        teacher = np.array([[60.0, -60.0]])
        student = np.zeros((1, 2))
        loss, _ = ops.kl_distill_loss(teacher, student, temperature=1.0)
        assert loss == pytest.approx(math.log(2.0), rel=1e-9)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            t = rng.normal(size=(3, 4))
            s = rng.normal(size=(3, 4))
            loss, _ = ops.kl_distill_loss(t, s, temperature=1.5)
            assert loss >= 0.0

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            ops.kl_distill_loss(np.zeros((1, 2)), np.zeros((1, 2)), temperature=0.0)


class TestSGD:
    def test_single_step_no_momentum(self):
        params = {"w": np.array([1.0], dtype=np.float32)}
        grads = {"w": np.array([1.0], dtype=np.float32)}
        state = ops.init_optimizer(params, momentum=0.0, lr=0.1)
        ops.sgd_step(params, grads, state)
        np.testing.assert_allclose(params["w"], [0.9], rtol=1e-6)

    def test_momentum_recurrence(self):
        params = {"w": np.array([1.0], dtype=np.float64)}
        grads = {"w": np.array([1.0], dtype=np.float64)}
        state = ops.init_optimizer(params, momentum=0.5, lr=0.1)
        ops.sgd_step(params, grads, state)
        assert params["w"][0] == pytest.approx(0.9)
        ops.sgd_step(params, grads, state)
        assert params["w"][0] == pytest.approx(0.75)  # second step moves 0.15

    def test_zero_grad_keeps_params(self):
        params = {"w": np.array([2.0], dtype=np.float32)}
        grads = {"w": np.zeros(1, dtype=np.float32)}
        state = ops.init_optimizer(params, momentum=0.9, lr=0.5)
        ops.sgd_step(params, grads, state)
        np.testing.assert_array_equal(params["w"], [2.0])

    def test_state_validation(self):
        with pytest.raises(ValueError):
            ops.OptimizerState(velocity={}, momentum=1.0, lr=0.1)
        with pytest.raises(ValueError):
            ops.OptimizerState(velocity={}, momentum=0.0, lr=0.0)


class TestClipGlobalNorm:
    def test_scales_above_threshold(self):
        grads = {"a": np.array([3.0, 4.0], dtype=np.float64)}
        ops.clip_global_norm(grads, 1.0)
        np.testing.assert_allclose(grads["a"], [0.6, 0.8], rtol=1e-12)

    def test_identity_below_threshold(self):
        grads = {"a": np.array([0.1], dtype=np.float64)}
        ops.clip_global_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.1])

    def test_boundary_untouched(self):
        grads = {"a": np.array([1.0], dtype=np.float64)}
        ops.clip_global_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [1.0])

    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=8),
           st.floats(0.01, 10))
    @settings(max_examples=60, deadline=None)
    def test_never_increases_norm(self, values, max_norm):
        grads = {"g": np.array(values, dtype=np.float64)}
        before = ops.global_norm(grads)
        ops.clip_global_norm(grads, max_norm)
        after = ops.global_norm(grads)
        assert after <= before + 1e-12
        assert after <= max_norm * (1 + 1e-12) or before <= max_norm
