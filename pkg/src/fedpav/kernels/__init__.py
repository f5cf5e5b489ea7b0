"""Kernel backend selection.

The compiled extension is preferred when importable; set
``FEDPAV_KERNELS=python`` to force the NumPy fallback or
``FEDPAV_KERNELS=compiled`` to fail loudly when the extension is missing.
"""

import os
import warnings

from . import reference

_requested = os.environ.get("FEDPAV_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(
        f"FEDPAV_KERNELS must be auto, compiled or python, got {_requested!r}"
    )

if _requested == "python":
    _impl = reference
else:
    try:
        from . import _speedups as _impl
    except ImportError:
        if _requested == "compiled":
            raise
        warnings.warn(
            "fedpav: compiled kernels unavailable, falling back to NumPy "
            "(build the extension or set FEDPAV_KERNELS=python to silence)"
        )
        _impl = reference

BACKEND = _impl.NAME
sgd_epoch = _impl.sgd_epoch
match_stats = _impl.match_stats

__all__ = ["BACKEND", "sgd_epoch", "match_stats", "reference"]
