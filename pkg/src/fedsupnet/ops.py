"""Dense-tensor layer operations with exact reverse-mode gradients.

Everything operates on plain numpy arrays: float32 for training, float64
for gradient checking and oracles. Convolutions expect NCHW layout, square
odd kernels and "same" padding of (k-1)//2 (spatial size is preserved
before striding, so output is [N, c_out, ceil(H/s), ceil(W/s)]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernels


def _pad_input(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _check_conv_args(x, weight, stride, padding, groups):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and weight, got {x.ndim}-d and {weight.ndim}-d"
        )
    c_out, c_in_g, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d kernels must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {kh}")
    if padding != (kh - 1) // 2:
        raise ValueError(f"conv2d requires padding (k-1)/2 = {(kh - 1) // 2}, got {padding}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    c_in = x.shape[1]
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ValueError(
            f"groups={groups} must divide c_in={c_in} and c_out={c_out}"
        )
    if c_in_g != c_in // groups:
        raise ValueError(
            f"weight expects {c_in_g} input channels per group, input has "
            f"{c_in // groups} (c_in={c_in}, groups={groups})"
        )
    if x.dtype != weight.dtype:
        raise ValueError(f"dtype mismatch: input {x.dtype}, weight {weight.dtype}")


def _conv_forward_ordered(xp, weight, stride):
    """groups=1 forward accumulated in canonical (c_in, kh, kw) order.

    Bit-identical to the direct nested-loop convolution definition; used
    for the float64 oracle mode.
    """
    b, c, hp, wp = xp.shape
    c_out, _, k, _ = weight.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sb, sc, sh, sw = xp.strides
    pv = as_strided(
        xp,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    out = np.zeros((b, c_out, ho, wo), dtype=xp.dtype)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                out += weight[None, :, ci, i, j, None, None] * pv[:, None, ci, i, j, :, :]
    return out


def _conv_forward_g1(xp, weight, stride):
    c_out = weight.shape[0]
    k = weight.shape[2]
    b = xp.shape[0]
    if xp.dtype == np.float64:
        return _conv_forward_ordered(xp, weight, stride)
    if k == 1:
        xs = xp if stride == 1 else xp[:, :, ::stride, ::stride]
        ho, wo = xs.shape[2], xs.shape[3]
        cols = np.ascontiguousarray(xs).reshape(b, xs.shape[1], ho * wo)
    else:
        cols = kernels.im2col(xp, k, stride)
        hp, wp = xp.shape[2], xp.shape[3]
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
    wmat = weight.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    return out.reshape(b, c_out, ho, wo)


def _conv_backward_g1(gout, xp, weight, stride):
    b, c, hp, wp = xp.shape
    c_out, _, k, _ = weight.shape
    ho, wo = gout.shape[2], gout.shape[3]
    go = gout.reshape(b, c_out, ho * wo)
    if k == 1:
        xs = xp if stride == 1 else xp[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs).reshape(b, c, ho * wo)
    else:
        cols = kernels.im2col(xp, k, stride)
    gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    wmat = weight.reshape(c_out, -1)
    gcols = np.matmul(wmat.T, go)
    if k == 1:
        if stride == 1:
            gx = gcols.reshape(b, c, hp, wp)
        else:
            gx = np.zeros((b, c, hp, wp), dtype=gout.dtype)
            gx[:, :, ::stride, ::stride] = gcols.reshape(b, c, ho, wo)
    else:
        gx = kernels.col2im(np.ascontiguousarray(gcols), c, hp, wp, k, stride)
    return gx, gw


def conv2d_forward(x, weight, stride=1, padding=0, groups=1):
    """2-d convolution, no bias. Returns [N, c_out, ceil(H/s), ceil(W/s)]."""
    _check_conv_args(x, weight, stride, padding, groups)
    c_in = x.shape[1]
    c_out, _, k, _ = weight.shape
    xp = _pad_input(x, padding)
    if groups == 1:
        return _conv_forward_g1(xp, weight, stride)
    if groups == c_in == c_out:
        wk = np.ascontiguousarray(weight[:, 0])
        return kernels.depthwise_forward(xp, wk, stride)
    cg = c_in // groups
    og = c_out // groups
    parts = [
        _conv_forward_g1(
            np.ascontiguousarray(xp[:, g * cg : (g + 1) * cg]),
            np.ascontiguousarray(weight[g * og : (g + 1) * og]),
            stride,
        )
        for g in range(groups)
    ]
    return np.concatenate(parts, axis=1)


def conv2d_backward(gout, x, weight, stride=1, padding=0, groups=1):
    """Gradients of conv2d_forward w.r.t. input and weight."""
    _check_conv_args(x, weight, stride, padding, groups)
    c_in = x.shape[1]
    c_out = weight.shape[0]
    hp = x.shape[2] + 2 * padding
    wp = x.shape[3] + 2 * padding
    k = weight.shape[2]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if gout.shape != (x.shape[0], c_out, ho, wo):
        raise ValueError(
            f"grad_out shape {gout.shape} does not match forward output "
            f"{(x.shape[0], c_out, ho, wo)}"
        )
    gout = np.ascontiguousarray(gout)
    xp = _pad_input(x, padding)
    if groups == 1:
        gxp, gw = _conv_backward_g1(gout, xp, weight, stride)
    elif groups == c_in == c_out:
        wk = np.ascontiguousarray(weight[:, 0])
        gxp, gwk = kernels.depthwise_backward(gout, xp, wk, stride)
        gw = gwk[:, None]
    else:
        cg = c_in // groups
        og = c_out // groups
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight)
        for g in range(groups):
            gxi, gwi = _conv_backward_g1(
                np.ascontiguousarray(gout[:, g * og : (g + 1) * og]),
                np.ascontiguousarray(xp[:, g * cg : (g + 1) * cg]),
                np.ascontiguousarray(weight[g * og : (g + 1) * og]),
                stride,
            )
            gxp[:, g * cg : (g + 1) * cg] = gxi
            gw[g * og : (g + 1) * og] = gwi
    if padding:
        gx = gxp[:, :, padding:-padding, padding:-padding]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw


def linear_forward(x, weight, bias):
    """x [N, d_in] @ weight.T [d_in, d_out] + bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear input has {x.shape[1]} features, weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match d_out {weight.shape[0]}")
    return x @ weight.T + bias


def linear_forward_rowwise(x, weight, bias):
    """linear_forward computed sample by sample (stacked matvecs).

    Guarantees each output row depends only on its own input row at the
    bit level, independent of the batch it is embedded in.
    """
    out = np.matmul(x[:, None, :], weight.T)[:, 0, :]
    return out + bias


def linear_backward(gout, x, weight):
    """Returns (grad_x, grad_weight, grad_bias)."""
    gx = gout @ weight
    gw = gout.T @ x
    gb = gout.sum(axis=0)
    return gx, gw, gb


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(gout, x):
    return gout * (x > 0)


def global_avg_pool_forward(x):
    """Mean over spatial dims: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects a 4-d input")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(gout, spatial_shape):
    h, w = spatial_shape
    scale = gout.dtype.type(1.0 / (h * w))
    return np.broadcast_to((gout * scale)[:, :, None, None], gout.shape + (h, w)).copy()


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels, label_smoothing=0.0):
    """Mean cross-entropy with optional uniform label smoothing.

    Returns (loss, grad_logits). Targets are
    (1 - ls) * onehot + ls / C.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be [N, C]")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    logp = _log_softmax(logits)
    p = np.exp(logp)
    q = np.full_like(logits, label_smoothing / c)
    q[np.arange(n), labels] += 1.0 - label_smoothing
    loss = float(-(q * logp).sum() / n)
    grad = (p - q) / logits.dtype.type(n)
    return loss, grad


def kl_distill_loss(teacher_logits, student_logits, temperature=1.0):
    """Temperature-scaled KL(teacher || student) * T^2, batch mean.

    Gradient flows to the student logits only.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"teacher {teacher_logits.shape} and student {student_logits.shape} differ"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = teacher_logits.shape[0]
    t = teacher_logits.dtype.type(temperature)
    log_pt = _log_softmax(teacher_logits / t)
    log_ps = _log_softmax(student_logits / t)
    pt = np.exp(log_pt)
    loss = float(temperature * temperature * (pt * (log_pt - log_ps)).sum() / n)
    grad_student = (temperature / n) * (np.exp(log_ps) - pt)
    return loss, grad_student.astype(student_logits.dtype)


@dataclass
class OptimizerState:
    """SGD-with-momentum state: one velocity buffer per parameter."""

    velocity: dict
    momentum: float
    lr: float

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def init_optimizer(params, momentum, lr):
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    return OptimizerState(velocity=velocity, momentum=momentum, lr=lr)


def sgd_step(params, grads, state):
    """v <- m*v + g; w <- w - lr*v, in place."""
    for name, p in params.items():
        v = state.velocity[name]
        np.multiply(v, v.dtype.type(state.momentum), out=v)
        v += grads[name]
        p -= p.dtype.type(state.lr) * v
    return params, state


def global_norm(grads):
    """L2 norm over all entries of all arrays, accumulated in float64."""
    total = 0.0
    for g in grads.values() if isinstance(grads, dict) else grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_global_norm(grads, max_norm):
    """Scale grads in place so the global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        arrays = grads.values() if isinstance(grads, dict) else grads
        for g in arrays:
            g *= g.dtype.type(max_norm / norm)
    return grads
