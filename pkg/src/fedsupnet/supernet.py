"""Shared parameter store at maximal dimensions, sliced by child views.

Every child architecture trains against the same storage: channel slices
take the first ceil(w * C_max) channels, kernel slices take the centered
k-by-k window of the stored max-kernel tensor, depth takes the first d
layers of each stage. Gradients from a child land only inside its view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import norm as normlib
from . import ops
from .space import (
    NORM_PARAMS_PER_CHANNEL,
    layer_geometry,
    param_count,
    validate_spec,
)

NORM_KINDS = ("pn", "sbn", "bn")


def _norm_param_names(kind):
    return ("alpha", "gamma", "beta") if kind == "pn" else ("gamma", "beta")


@dataclass
class LayerView:
    """Index ranges of one active layer inside the supernet tensors."""

    prefix: str
    c_in: int
    c_out: int
    k: int
    k_off: int
    stride: int


@dataclass
class SubnetView:
    spec: object
    layers: list
    head_in: int


@dataclass
class MaterializedModel:
    """Contiguous copy of exactly one child's parameters."""

    spec: object
    norm: str
    params: dict

    @property
    def nbytes(self):
        return sum(p.nbytes for p in self.params.values())

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())


class Supernet:
    """Parameter store plus the fixed forward/backward over a view."""

    def __init__(self, space, params, buffers, param_order, norm="pn",
                 dtype=np.float32, eps=normlib.DEFAULT_EPS):
        self.space = space
        self.params = params
        self.buffers = buffers
        self.param_order = param_order
        self.norm = norm
        self.dtype = dtype
        self.eps = eps

    # -- construction ----------------------------------------------------

    @staticmethod
    def layer_names(space):
        """(prefix, c_in_max, c_out_max) of every stored block, in order."""
        out = []
        c_in = space.stem_channels
        for si, stage in enumerate(space.stages):
            for li in range(stage.max_layers):
                out.append((f"s{si}.l{li}", c_in, stage.max_channels))
                c_in = stage.max_channels
        return out

    def total_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return Supernet(
            space=self.space,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            param_order=list(self.param_order),
            norm=self.norm,
            dtype=self.dtype,
            eps=self.eps,
        )

    def _norm_forward(self, prefix, x, train):
        p = self.params
        if self.norm == "pn":
            return normlib.pn_forward(
                x, p[f"{prefix}.alpha"], p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                eps=self.eps, train=train,
            )
        if self.norm == "sbn":
            return normlib.sbn_forward(
                x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], eps=self.eps, train=train
            )
        return normlib.bn_forward(
            x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
            self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
            eps=self.eps, train=train,
        )

    def _norm_backward(self, prefix, gout, x, grads, c):
        p = self.params
        if self.norm == "pn":
            gx, ga, gg, gb = normlib.pn_backward(
                gout, x, p[f"{prefix}.alpha"], p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                eps=self.eps,
            )
            grads[f"{prefix}.alpha"][:c] += ga
        else:
            gx, gg, gb = normlib.sbn_backward(
                gout, x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], eps=self.eps
            )
        grads[f"{prefix}.gamma"][:c] += gg
        grads[f"{prefix}.beta"][:c] += gb
        return gx


def build(space, seed_or_rng, norm="pn", dtype=np.float32):
    """He fan-in init for convs, identity-like init for normalization."""
    if norm not in NORM_KINDS:
        raise ValueError(f"norm must be one of {NORM_KINDS}, got {norm!r}")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    params = {}
    buffers = {}
    order = []

    def he_conv(name, c_out, c_in_g, k):
        std = np.sqrt(2.0 / (c_in_g * k * k))
        params[name] = (rng.normal(0.0, std, size=(c_out, c_in_g, k, k))).astype(dtype)
        order.append(name)

    def add_norm(prefix, channels):
        for pname in _norm_param_names(norm):
            init = np.ones if pname == "gamma" else np.zeros
            params[f"{prefix}.{pname}"] = init(channels, dtype=dtype)
            order.append(f"{prefix}.{pname}")
        if norm == "bn":
            buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=dtype)
            buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=dtype)

    he_conv("stem.conv.w", space.stem_channels, 3, space.stem_kernel)
    add_norm("stem.norm", space.stem_channels)
    kmax = space.max_kernel
    for prefix, c_in_max, c_out_max in Supernet.layer_names(space):
        he_conv(f"{prefix}.dw.w", c_in_max, 1, kmax)
        add_norm(f"{prefix}.dw.norm", c_in_max)
        he_conv(f"{prefix}.pw.w", c_out_max, c_in_max, 1)
        add_norm(f"{prefix}.pw.norm", c_out_max)
    c_last = space.stages[-1].max_channels
    std = np.sqrt(2.0 / c_last)
    params["head.w"] = rng.normal(0.0, std, size=(space.num_classes, c_last)).astype(dtype)
    params["head.b"] = np.zeros(space.num_classes, dtype=dtype)
    order += ["head.w", "head.b"]
    return Supernet(space, params, buffers, order, norm=norm, dtype=dtype)


def view(net, spec):
    """Resolve a child spec into per-layer index ranges."""
    validate_spec(net.space, spec)
    kmax = net.space.max_kernel
    layers = []
    head_in = net.space.stem_channels
    for si, li, c_in, c_out, k, stride, _ in layer_geometry(net.space, spec):
        layers.append(
            LayerView(
                prefix=f"s{si}.l{li}",
                c_in=c_in,
                c_out=c_out,
                k=k,
                k_off=(kmax - k) // 2,
                stride=stride,
            )
        )
        head_in = c_out
    return SubnetView(spec=spec, layers=layers, head_in=head_in)


def _dw_slice(net, lv):
    w = net.params[f"{lv.prefix}.dw.w"]
    return w[: lv.c_in, :, lv.k_off : lv.k_off + lv.k, lv.k_off : lv.k_off + lv.k]


def _pw_slice(net, lv):
    return net.params[f"{lv.prefix}.pw.w"][: lv.c_out, : lv.c_in]


def run_forward(net, vw, x, train=True, want_cache=False):
    """Stem, MBConv stages (depthwise + norm + relu, pointwise + norm +
    relu), global average pool, linear head. Returns (logits, cache)."""
    if x.ndim != 4 or x.shape[2] != net.space.input_resolution:
        raise ValueError(
            f"expected NCHW batch at resolution {net.space.input_resolution}, "
            f"got shape {tuple(x.shape)}"
        )
    cache = [] if want_cache else None
    sk = net.space.stem_kernel
    h = ops.conv2d_forward(x, net.params["stem.conv.w"], stride=net.space.stem_stride,
                           padding=(sk - 1) // 2)
    if want_cache:
        cache.append({"conv_in": x, "norm_in": h})
    h = net._norm_forward("stem.norm", h, train)
    if want_cache:
        cache[-1]["relu_in"] = h
    h = ops.relu_forward(h)

    for lv in vw.layers:
        entry = {} if want_cache else None
        wd = _dw_slice(net, lv)
        if want_cache:
            entry["dw_in"] = h
        hd = ops.conv2d_forward(h, wd, stride=lv.stride, padding=(lv.k - 1) // 2,
                                groups=lv.c_in)
        if want_cache:
            entry["dw_norm_in"] = hd
        hd = net._norm_forward(f"{lv.prefix}.dw.norm", hd, train)
        if want_cache:
            entry["dw_relu_in"] = hd
        hd = ops.relu_forward(hd)
        wp = _pw_slice(net, lv)
        if want_cache:
            entry["pw_in"] = hd
        hp = ops.conv2d_forward(hd, wp, stride=1, padding=0)
        if want_cache:
            entry["pw_norm_in"] = hp
        hp = net._norm_forward(f"{lv.prefix}.pw.norm", hp, train)
        if want_cache:
            entry["pw_relu_in"] = hp
            cache.append(entry)
        h = ops.relu_forward(hp)

    feats = ops.global_avg_pool_forward(h)
    hw = net.params["head.w"][:, : vw.head_in]
    if train:
        logits = ops.linear_forward(feats, hw, net.params["head.b"])
    else:
        # row-wise path keeps each sample's logits batch-independent bitwise
        logits = ops.linear_forward_rowwise(feats, hw, net.params["head.b"])
    if want_cache:
        cache.append({"feats": feats, "pool_in_hw": h.shape[2:]})
    return logits, cache


def forward(net, spec_or_view, x, train=False):
    vw = spec_or_view if isinstance(spec_or_view, SubnetView) else view(net, spec_or_view)
    logits, _ = run_forward(net, vw, x, train=train, want_cache=False)
    return logits


def run_backward(net, vw, cache, glogits, grads):
    """Backpropagate glogits through the cached forward, accumulating
    parameter gradients into the full-shape grads dict at view ranges."""
    head_cache = cache[-1]
    feats = head_cache["feats"]
    hw = net.params["head.w"][:, : vw.head_in]
    gfeats, ghw, ghb = ops.linear_backward(glogits, feats, hw)
    grads["head.w"][:, : vw.head_in] += ghw
    grads["head.b"] += ghb
    g = ops.global_avg_pool_backward(gfeats, head_cache["pool_in_hw"])

    for lv, entry in zip(reversed(vw.layers), reversed(cache[1:-1])):
        g = ops.relu_backward(g, entry["pw_relu_in"])
        g = net._norm_backward(f"{lv.prefix}.pw.norm", g, entry["pw_norm_in"], grads, lv.c_out)
        wp = _pw_slice(net, lv)
        g, gwp = ops.conv2d_backward(g, entry["pw_in"], wp, stride=1, padding=0)
        grads[f"{lv.prefix}.pw.w"][: lv.c_out, : lv.c_in] += gwp
        g = ops.relu_backward(g, entry["dw_relu_in"])
        g = net._norm_backward(f"{lv.prefix}.dw.norm", g, entry["dw_norm_in"], grads, lv.c_in)
        wd = _dw_slice(net, lv)
        g, gwd = ops.conv2d_backward(g, entry["dw_in"], wd, stride=lv.stride,
                                     padding=(lv.k - 1) // 2, groups=lv.c_in)
        grads[f"{lv.prefix}.dw.w"][
            : lv.c_in, :, lv.k_off : lv.k_off + lv.k, lv.k_off : lv.k_off + lv.k
        ] += gwd

    stem = cache[0]
    g = ops.relu_backward(g, stem["relu_in"])
    g = net._norm_backward("stem.norm", g, stem["norm_in"], grads, net.space.stem_channels)
    sk = net.space.stem_kernel
    _, gws = ops.conv2d_backward(g, stem["conv_in"], net.params["stem.conv.w"],
                                 stride=net.space.stem_stride, padding=(sk - 1) // 2)
    grads["stem.conv.w"] += gws


def child_loss(logits, labels, label_smoothing=0.0, teacher_logits=None,
               temperature=1.0, balance=0.5):
    """Cross-entropy, optionally mixed with distillation against a teacher.

    With a teacher: (1 - balance)*CE + balance*T^2*KL(teacher || student).
    Returns (loss, grad_logits).
    """
    ce, gce = ops.softmax_cross_entropy(logits, labels, label_smoothing)
    if teacher_logits is None:
        return ce, gce
    kl, gkl = ops.kl_distill_loss(teacher_logits, logits, temperature)
    b = balance
    loss = (1.0 - b) * ce + b * kl
    grad = logits.dtype.type(1.0 - b) * gce + logits.dtype.type(b) * gkl
    return loss, grad


def backward_accumulate(net, vw, x, labels, grads, *, label_smoothing=0.0,
                        teacher_logits=None, temperature=1.0, balance=0.5,
                        train=True):
    """One child's loss and gradient contribution, added into grads.

    Parameters outside the view's index ranges receive exactly zero.
    Returns (loss, logits).
    """
    if not isinstance(vw, SubnetView):
        vw = view(net, vw)
    logits, cache = run_forward(net, vw, x, train=train, want_cache=True)
    loss, glogits = child_loss(
        logits, labels, label_smoothing=label_smoothing,
        teacher_logits=teacher_logits, temperature=temperature, balance=balance,
    )
    run_backward(net, vw, cache, glogits, grads)
    return loss, logits


def zero_grads(net):
    return {name: np.zeros_like(p) for name, p in net.params.items()}


def features(net, spec_or_view, x, train=False):
    """Pooled body output, before the linear head."""
    vw = spec_or_view if isinstance(spec_or_view, SubnetView) else view(net, spec_or_view)
    sk = net.space.stem_kernel
    h = ops.conv2d_forward(x, net.params["stem.conv.w"], stride=net.space.stem_stride,
                           padding=(sk - 1) // 2)
    h = net._norm_forward("stem.norm", h, train)
    h = ops.relu_forward(h)
    for lv in vw.layers:
        h = ops.conv2d_forward(h, _dw_slice(net, lv), stride=lv.stride,
                               padding=(lv.k - 1) // 2, groups=lv.c_in)
        h = net._norm_forward(f"{lv.prefix}.dw.norm", h, train)
        h = ops.relu_forward(h)
        h = ops.conv2d_forward(h, _pw_slice(net, lv), stride=1, padding=0)
        h = net._norm_forward(f"{lv.prefix}.pw.norm", h, train)
        h = ops.relu_forward(h)
    return ops.global_avg_pool_forward(h)


def _sliced_param_items(net, vw):
    """Yield (name, sliced_view) for every parameter the child touches."""
    norm_names = _norm_param_names(net.norm)
    yield "stem.conv.w", net.params["stem.conv.w"]
    for pname in norm_names:
        yield f"stem.norm.{pname}", net.params[f"stem.norm.{pname}"]
    for lv in vw.layers:
        yield f"{lv.prefix}.dw.w", _dw_slice(net, lv)
        for pname in norm_names:
            yield f"{lv.prefix}.dw.norm.{pname}", net.params[f"{lv.prefix}.dw.norm.{pname}"][: lv.c_in]
        yield f"{lv.prefix}.pw.w", _pw_slice(net, lv)
        for pname in norm_names:
            yield f"{lv.prefix}.pw.norm.{pname}", net.params[f"{lv.prefix}.pw.norm.{pname}"][: lv.c_out]
    yield "head.w", net.params["head.w"][:, : vw.head_in]
    yield "head.b", net.params["head.b"]


def extract_submodel(net, spec):
    """Contiguous copy of exactly the view's parameters."""
    vw = view(net, spec)
    params = {name: np.ascontiguousarray(arr) for name, arr in _sliced_param_items(net, vw)}
    return MaterializedModel(spec=spec, norm=net.norm, params=params)


def merge_submodel(base, trained):
    """Parameters equal to base everywhere except the trained view ranges."""
    if trained.norm != base.norm:
        raise ValueError(f"norm kind mismatch: {trained.norm} vs {base.norm}")
    vw = view(base, trained.spec)
    merged = {k: v.copy() for k, v in base.params.items()}
    shadow = Supernet(base.space, merged, base.buffers, base.param_order,
                      norm=base.norm, dtype=base.dtype, eps=base.eps)
    for name, slot in _sliced_param_items(shadow, vw):
        src = trained.params[name]
        if slot.shape != src.shape:
            raise ValueError(
                f"{name}: trained shape {src.shape} does not fit view slot {slot.shape}"
            )
        slot[...] = src
    return merged


def expected_param_count(net, spec):
    """param_count with the per-channel norm size of this net's scheme."""
    npc = NORM_PARAMS_PER_CHANNEL if net.norm == "pn" else 2
    return param_count(net.space, spec, norm_params_per_channel=npc)


def supernet_nbytes(net):
    return sum(p.nbytes for p in net.params.values())


def assert_finite(net):
    for name, p in net.params.items():
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"non-finite values in parameter {name}")
