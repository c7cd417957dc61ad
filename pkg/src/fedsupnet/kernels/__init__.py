"""Convolution inner-loop kernels with backend selection at import.

The compiled Cython core is used when available; otherwise (or when the
FEDSUPNET_FORCE_PYTHON environment variable is set) the pure-numpy
fallback is selected. Both backends expose the same four functions.
``BACKEND`` records which one is active.
"""

import os

from . import _fallback

if os.environ.get("FEDSUPNET_FORCE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward


def get_backend(name):
    """Return a backend module by name ("compiled" or "python")."""
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
