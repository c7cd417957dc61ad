"""Elastic architecture space: child sampling and analytic cost models.

A child network is described per stage by a depth and, per active layer,
a width multiplier and a kernel size. Lower-index layers of a stage are
always the ones kept when depth shrinks; channel slices are prefixes and
kernel slices are centered windows (see the supernet module).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

NORM_PARAMS_PER_CHANNEL = 3  # parametric normalization: alpha, gamma, beta


class LayerPick(NamedTuple):
    """One active layer's width multiplier and kernel size."""

    w: float
    k: int


@dataclass(frozen=True)
class StageSpec:
    max_layers: int
    min_layers: int
    max_channels: int
    first_layer_stride: int

    def __post_init__(self):
        if not 1 <= self.min_layers <= self.max_layers:
            raise ValueError(
                f"need 1 <= min_layers <= max_layers, got {self.min_layers}, {self.max_layers}"
            )
        if self.max_channels <= 0:
            raise ValueError(f"max_channels must be positive, got {self.max_channels}")
        if self.first_layer_stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.first_layer_stride}")


@dataclass(frozen=True)
class ArchSpace:
    stages: tuple
    width_multipliers: tuple = (0.5, 0.75, 1.0)
    kernel_choices: tuple = (3, 5, 7)
    num_classes: int = 10
    input_resolution: int = 32
    stem_channels: int = 32
    stem_kernel: int = 3
    stem_stride: int = 1

    def __post_init__(self):
        if not self.stages:
            raise ValueError("stage list must be non-empty")
        ws = self.width_multipliers
        if list(ws) != sorted(ws) or ws[-1] != 1.0 or any(not 0 < w <= 1 for w in ws):
            raise ValueError(
                f"width multipliers must be ascending in (0, 1] ending at 1.0, got {ws}"
            )
        if any(k % 2 == 0 or k < 1 for k in self.kernel_choices):
            raise ValueError(f"kernel choices must be odd, got {self.kernel_choices}")
        if list(self.kernel_choices) != sorted(self.kernel_choices):
            raise ValueError("kernel choices must be sorted ascending")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.stem_kernel % 2 == 0:
            raise ValueError("stem kernel must be odd")

    @property
    def max_kernel(self):
        return self.kernel_choices[-1]

    def to_json_dict(self):
        return {
            "stages": [
                {
                    "max_layers": s.max_layers,
                    "min_layers": s.min_layers,
                    "max_channels": s.max_channels,
                    "first_layer_stride": s.first_layer_stride,
                }
                for s in self.stages
            ],
            "width_multipliers": list(self.width_multipliers),
            "kernel_choices": list(self.kernel_choices),
            "num_classes": self.num_classes,
            "input_resolution": self.input_resolution,
            "stem_channels": self.stem_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            stages=tuple(
                StageSpec(
                    max_layers=s["max_layers"],
                    min_layers=s["min_layers"],
                    max_channels=s["max_channels"],
                    first_layer_stride=s["first_layer_stride"],
                )
                for s in d["stages"]
            ),
            width_multipliers=tuple(d["width_multipliers"]),
            kernel_choices=tuple(d["kernel_choices"]),
            num_classes=d["num_classes"],
            input_resolution=d["input_resolution"],
            stem_channels=d["stem_channels"],
            stem_kernel=d["stem_kernel"],
            stem_stride=d["stem_stride"],
        )


@dataclass(frozen=True)
class SubnetSpec:
    """One child: per stage, the picks of its active (first-d) layers."""

    stages: tuple  # tuple of tuples of LayerPick

    @property
    def depths(self):
        return tuple(len(s) for s in self.stages)

    def to_json_dict(self):
        return {
            "stages": [
                {"depth": len(layers), "layers": [{"w": p.w, "k": p.k} for p in layers]}
                for layers in self.stages
            ]
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            stages=tuple(
                tuple(LayerPick(w=l["w"], k=l["k"]) for l in s["layers"])
                for s in d["stages"]
            )
        )

    def canonical_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    def spec_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def validate_spec(space, spec):
    """Raise ValueError unless spec draws every choice from the space."""
    if len(spec.stages) != len(space.stages):
        raise ValueError(
            f"spec has {len(spec.stages)} stages, space has {len(space.stages)}"
        )
    for i, (layers, stage) in enumerate(zip(spec.stages, space.stages)):
        if not stage.min_layers <= len(layers) <= stage.max_layers:
            raise ValueError(
                f"stage {i}: depth {len(layers)} outside "
                f"[{stage.min_layers}, {stage.max_layers}]"
            )
        for j, pick in enumerate(layers):
            if pick.w not in space.width_multipliers:
                raise ValueError(f"stage {i} layer {j}: width {pick.w} not in space")
            if pick.k not in space.kernel_choices:
                raise ValueError(f"stage {i} layer {j}: kernel {pick.k} not in space")


def default_space(num_classes=10, input_resolution=32):
    """The MBConv search space used throughout: four stages after the stem."""
    return ArchSpace(
        stages=(
            StageSpec(max_layers=1, min_layers=1, max_channels=64, first_layer_stride=2),
            StageSpec(max_layers=2, min_layers=1, max_channels=128, first_layer_stride=1),
            StageSpec(max_layers=2, min_layers=1, max_channels=256, first_layer_stride=2),
            StageSpec(max_layers=2, min_layers=1, max_channels=1024, first_layer_stride=2),
        ),
        num_classes=num_classes,
        input_resolution=input_resolution,
    )


def active_channels(width, max_channels):
    return int(math.ceil(width * max_channels))


def smallest(space):
    w = space.width_multipliers[0]
    k = space.kernel_choices[0]
    return SubnetSpec(
        stages=tuple(tuple(LayerPick(w, k) for _ in range(s.min_layers)) for s in space.stages)
    )


def biggest(space):
    k = space.kernel_choices[-1]
    return SubnetSpec(
        stages=tuple(tuple(LayerPick(1.0, k) for _ in range(s.max_layers)) for s in space.stages)
    )


def medium(space):
    """Shallowest depth, full width, middle kernel choice."""
    k = space.kernel_choices[len(space.kernel_choices) // 2]
    return SubnetSpec(
        stages=tuple(tuple(LayerPick(1.0, k) for _ in range(s.min_layers)) for s in space.stages)
    )


def sample_random(space, rng):
    """Uniform independent choice for every depth, width and kernel slot."""
    stages = []
    for s in space.stages:
        depth = int(rng.integers(s.min_layers, s.max_layers + 1))
        stages.append(
            tuple(
                LayerPick(
                    w=float(space.width_multipliers[rng.integers(len(space.width_multipliers))]),
                    k=int(space.kernel_choices[rng.integers(len(space.kernel_choices))]),
                )
                for _ in range(depth)
            )
        )
    return SubnetSpec(stages=tuple(stages))


def sample_sandwich_set(space, m, rng):
    """M children per iteration; for M >= 3 the extremes are always included."""
    if m < 1:
        raise ValueError(f"need at least one child per iteration, got {m}")
    if m <= 2:
        return [sample_random(space, rng) for _ in range(m)]
    middle = [sample_random(space, rng) for _ in range(m - 2)]
    return [biggest(space)] + middle + [smallest(space)]


def sample_within_flops(space, max_flops, rng, max_attempts=10000):
    """Rejection-sample children until the budget is met.

    Falls back to the smallest child if the budget is so tight that no
    random draw lands inside it within max_attempts.
    """
    floor = flops(space, smallest(space))
    if max_flops < floor:
        raise ValueError(
            f"budget {max_flops} below the smallest child's cost {floor}"
        )
    for _ in range(max_attempts):
        spec = sample_random(space, rng)
        if flops(space, spec) <= max_flops:
            return spec
    return smallest(space)


def layer_geometry(space, spec):
    """Yield (stage_idx, layer_idx, c_in, c_out, k, stride, out_hw) per layer.

    out_hw is the layer's output spatial side; the stem is not included.
    """
    validate_spec(space, spec)
    hw = -(-space.input_resolution // space.stem_stride)
    c_in = space.stem_channels
    for si, (layers, stage) in enumerate(zip(spec.stages, space.stages)):
        for li, pick in enumerate(layers):
            stride = stage.first_layer_stride if li == 0 else 1
            hw = -(-hw // stride)
            c_out = active_channels(pick.w, stage.max_channels)
            yield si, li, c_in, c_out, pick.k, stride, hw
            c_in = c_out


def flops(space, spec):
    """Multiply-accumulate count of one forward pass for the child."""
    stem_hw = -(-space.input_resolution // space.stem_stride)
    total = stem_hw * stem_hw * space.stem_kernel**2 * 3 * space.stem_channels
    c_last = space.stem_channels
    for _, _, c_in, c_out, k, _, hw in layer_geometry(space, spec):
        total += hw * hw * k * k * c_in          # depthwise: c_in/groups == 1
        total += hw * hw * c_in * c_out          # pointwise 1x1
        c_last = c_out
    total += c_last * space.num_classes          # classifier head
    return total


def param_count(space, spec, norm_params_per_channel=NORM_PARAMS_PER_CHANNEL):
    """Learnable scalars of the child, normalization and head included."""
    npc = norm_params_per_channel
    total = 3 * space.stem_channels * space.stem_kernel**2 + npc * space.stem_channels
    c_last = space.stem_channels
    for _, _, c_in, c_out, k, _, _ in layer_geometry(space, spec):
        total += c_in * k * k + npc * c_in       # depthwise weight + its norm
        total += c_in * c_out + npc * c_out      # pointwise weight + its norm
        c_last = c_out
    total += c_last * space.num_classes + space.num_classes
    return total


def count_subnets(space):
    """Exact number of distinct children (exact big-integer arithmetic)."""
    per_layer = len(space.width_multipliers) * len(space.kernel_choices)
    total = 1
    for s in space.stages:
        total *= sum(per_layer**d for d in range(s.min_layers, s.max_layers + 1))
    return total
