"""Normalization layers behind one interface.

Three schemes over NCHW activations:

* parametric ("pn"): x is centered by a learnable per-channel offset and
  divided by the RMS of the centered values. No data statistics are ever
  stored. At train time the RMS reduces over batch+spatial; at eval time
  it is computed per sample over spatial dims only, so a sample's output
  never depends on the rest of the query batch.
* static batch norm ("sbn"): normalizes by the current batch's mean and
  variance in both phases; keeps no running statistics. Eval outputs are
  therefore query-batch dependent.
* batch norm ("bn"): classic running-statistics variant, for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-5


def _per_channel(v):
    return v[None, :, None, None]


def pn_forward(x, alpha, gamma, beta, *, eps=DEFAULT_EPS, train=True):
    """y = gamma * (x - alpha) / (RMS(x - alpha) + eps) + beta."""
    if x.ndim != 4:
        raise ValueError("pn_forward expects NCHW input")
    c = x.shape[1]
    if alpha.shape[0] < c:
        raise ValueError(f"input has {c} channels, state holds {alpha.shape[0]}")
    a, g, b = alpha[:c], gamma[:c], beta[:c]
    z = x - _per_channel(a)
    axes = (0, 2, 3) if train else (2, 3)
    rms = np.sqrt(np.mean(z * z, axis=axes, keepdims=True))
    xhat = z / (rms + x.dtype.type(eps))
    return _per_channel(g) * xhat + _per_channel(b)


def pn_backward(gout, x, alpha, gamma, beta, *, eps=DEFAULT_EPS):
    """Train-mode gradients: (grad_x, grad_alpha, grad_gamma, grad_beta).

    Includes the dependence of the RMS on both x and alpha.
    """
    c = x.shape[1]
    a, g = alpha[:c], gamma[:c]
    z = x - _per_channel(a)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    rms = np.sqrt(np.mean(z * z, axis=axes, keepdims=True))
    denom = rms + x.dtype.type(eps)
    xhat = z / denom
    gxhat = gout * _per_channel(g)
    dot = (gxhat * z).sum(axis=axes, keepdims=True)
    # d rms / d z_j = z_j / (m * rms); zero where rms == 0 (then z == 0 too).
    denom_mr = m * rms * denom * denom
    inv_mr = np.divide(
        1.0, denom_mr, out=np.zeros_like(denom_mr), where=denom_mr > 0
    ).astype(x.dtype)
    gz = gxhat / denom - dot * z * inv_mr
    grad_alpha = -gz.sum(axis=axes)
    grad_gamma = (gout * xhat).sum(axis=axes)
    grad_beta = gout.sum(axis=axes)
    return gz, grad_alpha, grad_gamma, grad_beta


def sbn_forward(x, gamma, beta, *, eps=DEFAULT_EPS, train=True):
    """Normalize by the current batch's mean/variance in both phases."""
    if x.ndim != 4:
        raise ValueError("sbn_forward expects NCHW input")
    if train and x.shape[0] < 2:
        raise ValueError("static batch norm needs batch >= 2 at train time")
    c = x.shape[1]
    g, b = gamma[:c], beta[:c]
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    xhat = (x - mean) / np.sqrt(var + x.dtype.type(eps))
    return _per_channel(g) * xhat + _per_channel(b)


def sbn_backward(gout, x, gamma, beta, *, eps=DEFAULT_EPS):
    """Batch-statistics backward: (grad_x, grad_gamma, grad_beta)."""
    c = x.shape[1]
    g = gamma[:c]
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mean) * inv_std
    gxhat = gout * _per_channel(g)
    gx = (
        inv_std
        / m
        * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
           - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
    ).astype(x.dtype)
    grad_gamma = (gout * xhat).sum(axis=axes)
    grad_beta = gout.sum(axis=axes)
    return gx, grad_gamma, grad_beta


def bn_forward(x, gamma, beta, running_mean, running_var, *, momentum=0.1,
               eps=DEFAULT_EPS, train=True):
    """Standard batch norm; updates running statistics in place at train."""
    c = x.shape[1]
    g, b = gamma[:c], beta[:c]
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch norm needs batch >= 2 at train time")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean[:c] = (1.0 - momentum) * running_mean[:c] + momentum * mean
        running_var[:c] = (1.0 - momentum) * running_var[:c] + momentum * var
    else:
        mean = running_mean[:c]
        var = running_var[:c]
    xhat = (x - _per_channel(mean)) / np.sqrt(_per_channel(var) + x.dtype.type(eps))
    return _per_channel(g) * xhat + _per_channel(b)


def bn_backward(gout, x, gamma, beta, *, eps=DEFAULT_EPS):
    """Train-mode batch norm backward (batch statistics path)."""
    return sbn_backward(gout, x, gamma, beta, eps=eps)


@dataclass
class PNState:
    """Learnable per-channel offset/scale/shift; no data statistics."""

    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels, dtype=np.float32, eps=DEFAULT_EPS):
        return cls(
            alpha=np.zeros(channels, dtype=dtype),
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            eps=eps,
        )

    def forward(self, x, c=None, train=True):
        c = x.shape[1] if c is None else c
        if c > self.alpha.shape[0]:
            raise ValueError(f"active channels {c} exceed state size {self.alpha.shape[0]}")
        if x.shape[1] != c:
            raise ValueError(f"input has {x.shape[1]} channels, expected {c}")
        return pn_forward(x, self.alpha, self.gamma, self.beta, eps=self.eps, train=train)

    def backward(self, gout, x, c=None):
        return pn_backward(gout, x, self.alpha, self.gamma, self.beta, eps=self.eps)

    def serialize(self):
        """Byte image of the state; used to prove eval leaves it untouched."""
        return self.alpha.tobytes() + self.gamma.tobytes() + self.beta.tobytes()


@dataclass
class SBNState:
    """Affine parameters only; normalization uses each query batch's stats."""

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels, dtype=np.float32, eps=DEFAULT_EPS):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            eps=eps,
        )

    def forward(self, x, c=None, train=True):
        c = x.shape[1] if c is None else c
        if x.shape[1] != c:
            raise ValueError(f"input has {x.shape[1]} channels, expected {c}")
        return sbn_forward(x, self.gamma, self.beta, eps=self.eps, train=train)


@dataclass
class BNState:
    """Classic batch norm with tracked running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels, dtype=np.float32, momentum=0.1, eps=DEFAULT_EPS):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def forward(self, x, c=None, train=True):
        c = x.shape[1] if c is None else c
        if x.shape[1] != c:
            raise ValueError(f"input has {x.shape[1]} channels, expected {c}")
        return bn_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            momentum=self.momentum, eps=self.eps, train=train,
        )
