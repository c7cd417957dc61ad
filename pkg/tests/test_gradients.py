"""Finite-difference checks for every differentiable operation.

All checks run in float64 with central differences (step 1e-5) against a
random linear probe of the output, over 20 random seeds per op.
"""

import numpy as np
import pytest

from fedsupnet import norm, ops

from conftest import finite_difference, max_rel_error

SEEDS = range(20)
TOL = 1e-4
STEP = 1e-5


def probe_loss(out, r):
    return float((out * r).sum())


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_standard(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(int(rng.integers(1, 4)), 3, k, k))
    pad = (k - 1) // 2
    out = ops.conv2d_forward(x, w, stride=stride, padding=pad)
    r = rng.normal(size=out.shape)
    gx, gw = ops.conv2d_backward(r, x, w, stride=stride, padding=pad)
    fx = finite_difference(
        lambda v: probe_loss(ops.conv2d_forward(v, w, stride=stride, padding=pad), r),
        x, STEP)
    fw = finite_difference(
        lambda v: probe_loss(ops.conv2d_forward(x, v, stride=stride, padding=pad), r),
        w, STEP)
    assert max_rel_error(gx, fx) < TOL
    assert max_rel_error(gw, fw) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_depthwise(seed):
    rng = np.random.default_rng(1000 + seed)
    k = int(rng.choice([3, 5]))
    stride = int(rng.choice([1, 2]))
    c = int(rng.integers(1, 5))
    x = rng.normal(size=(2, c, 6, 6))
    w = rng.normal(size=(c, 1, k, k))
    pad = (k - 1) // 2
    out = ops.conv2d_forward(x, w, stride=stride, padding=pad, groups=c)
    r = rng.normal(size=out.shape)
    gx, gw = ops.conv2d_backward(r, x, w, stride=stride, padding=pad, groups=c)
    fx = finite_difference(
        lambda v: probe_loss(
            ops.conv2d_forward(v, w, stride=stride, padding=pad, groups=c), r),
        x, STEP)
    fw = finite_difference(
        lambda v: probe_loss(
            ops.conv2d_forward(x, v, stride=stride, padding=pad, groups=c), r),
        w, STEP)
    assert max_rel_error(gx, fx) < TOL
    assert max_rel_error(gw, fw) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_linear(seed):
    rng = np.random.default_rng(2000 + seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=5)
    r = rng.normal(size=(3, 5))
    gx, gw, gb = ops.linear_backward(r, x, w)
    fx = finite_difference(lambda v: probe_loss(ops.linear_forward(v, w, b), r), x, STEP)
    fw = finite_difference(lambda v: probe_loss(ops.linear_forward(x, v, b), r), w, STEP)
    fb = finite_difference(lambda v: probe_loss(ops.linear_forward(x, w, v), r), b, STEP)
    assert max_rel_error(gx, fx) < TOL
    assert max_rel_error(gw, fw) < TOL
    assert max_rel_error(gb, fb) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_relu(seed):
    rng = np.random.default_rng(3000 + seed)
    # keep inputs away from the kink, where the derivative is undefined
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.normal(size=x.shape)
    gx = ops.relu_backward(r, x)
    fx = finite_difference(lambda v: probe_loss(ops.relu_forward(v), r), x, STEP)
    assert max_rel_error(gx, fx) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avg_pool(seed):
    rng = np.random.default_rng(4000 + seed)
    x = rng.normal(size=(2, 3, 4, 5))
    r = rng.normal(size=(2, 3))
    gx = ops.global_avg_pool_backward(r, x.shape[2:])
    fx = finite_difference(lambda v: probe_loss(ops.global_avg_pool_forward(v), r), x, STEP)
    assert max_rel_error(gx, fx) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_softmax_cross_entropy(seed, smoothing):
    rng = np.random.default_rng(5000 + seed)
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)
    _, grad = ops.softmax_cross_entropy(logits, labels, smoothing)
    fg = finite_difference(
        lambda v: ops.softmax_cross_entropy(v, labels, smoothing)[0], logits, STEP)
    assert max_rel_error(grad, fg) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_kl_distill(seed):
    rng = np.random.default_rng(6000 + seed)
    teacher = rng.normal(size=(3, 5))
    student = rng.normal(size=(3, 5))
    temp = float(rng.uniform(0.5, 4.0))
    _, grad = ops.kl_distill_loss(teacher, student, temp)
    fg = finite_difference(
        lambda v: ops.kl_distill_loss(teacher, v, temp)[0], student, STEP)
    assert max_rel_error(grad, fg) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_parametric_norm_all_four_gradients(seed):
    rng = np.random.default_rng(7000 + seed)
    c = int(rng.integers(1, 5))
    x = rng.normal(size=(3, c, 4, 4))
    alpha = rng.normal(size=c) * 0.3
    gamma = rng.uniform(0.5, 1.5, size=c)
    beta = rng.normal(size=c) * 0.3
    r = rng.normal(size=x.shape)
    gx, ga, gg, gb = norm.pn_backward(r, x, alpha, gamma, beta)

    def loss_of(xx=None, aa=None, cc=None, bb=None):
        return probe_loss(
            norm.pn_forward(
                x if xx is None else xx,
                alpha if aa is None else aa,
                gamma if cc is None else cc,
                beta if bb is None else bb,
                train=True,
            ),
            r,
        )

    assert max_rel_error(gx, finite_difference(lambda v: loss_of(xx=v), x, STEP)) < TOL
    assert max_rel_error(ga, finite_difference(lambda v: loss_of(aa=v), alpha, STEP)) < TOL
    assert max_rel_error(gg, finite_difference(lambda v: loss_of(cc=v), gamma, STEP)) < TOL
    assert max_rel_error(gb, finite_difference(lambda v: loss_of(bb=v), beta, STEP)) < TOL


@pytest.mark.parametrize("seed", range(10))
def test_static_batch_norm_gradients(seed):
    rng = np.random.default_rng(8000 + seed)
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(3, c, 3, 3))
    gamma = rng.uniform(0.5, 1.5, size=c)
    beta = rng.normal(size=c) * 0.3
    r = rng.normal(size=x.shape)
    gx, gg, gb = norm.sbn_backward(r, x, gamma, beta)

    def loss_of(xx=None, cc=None, bb=None):
        return probe_loss(
            norm.sbn_forward(
                x if xx is None else xx,
                gamma if cc is None else cc,
                beta if bb is None else bb,
                train=True,
            ),
            r,
        )

    assert max_rel_error(gx, finite_difference(lambda v: loss_of(xx=v), x, STEP)) < TOL
    assert max_rel_error(gg, finite_difference(lambda v: loss_of(cc=v), gamma, STEP)) < TOL
    assert max_rel_error(gb, finite_difference(lambda v: loss_of(bb=v), beta, STEP)) < TOL
