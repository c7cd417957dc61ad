import numpy as np
import pytest

from fedsupnet import space as spacelib


def finite_difference(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    """Worst-case elementwise relative error with an absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def tiny_space(num_classes=4, input_resolution=8):
    """A two-stage space small enough for end-to-end gradient checks."""
    return spacelib.ArchSpace(
        stages=(
            spacelib.StageSpec(max_layers=1, min_layers=1, max_channels=6,
                               first_layer_stride=2),
            spacelib.StageSpec(max_layers=2, min_layers=1, max_channels=8,
                               first_layer_stride=2),
        ),
        width_multipliers=(0.5, 1.0),
        kernel_choices=(3, 5),
        num_classes=num_classes,
        input_resolution=input_resolution,
        stem_channels=4,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
