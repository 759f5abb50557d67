"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``TRIMIP_PURE_PYTHON`` is set to a non-empty value, the
NumPy fallback is used. ``BACKEND`` records which one is active.
"""

import os

from . import _pykernels

if os.environ.get("TRIMIP_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

mip_gather = _impl.mip_gather
mip_scatter = _impl.mip_scatter
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
bvh_closest_hit = _impl.bvh_closest_hit


def backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _pykernels
    from . import _ckernels
    return _ckernels
