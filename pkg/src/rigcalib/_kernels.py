"""Backend selection for the hot numeric kernels.

The compiled extension is used when it imported cleanly; setting the
environment variable ``RIGCALIB_PURE_PY=1`` before import forces the NumPy
fallback (useful for benchmarking and debugging).
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _accel as _accel_mod
except ImportError:
    _accel_mod = None

if _accel_mod is not None and not os.environ.get("RIGCALIB_PURE_PY"):
    BACKEND = "cython"
    _impl = _accel_mod
else:
    BACKEND = "numpy"
    _impl = _kernels_py

robust_normal_equations = _impl.robust_normal_equations
mahalanobis_costs = _impl.mahalanobis_costs


def available_backends() -> list[str]:
    out = ["numpy"]
    if _accel_mod is not None:
        out.insert(0, "cython")
    return out


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    if name == "numpy":
        return _kernels_py
    if name == "cython":
        if _accel_mod is None:
            raise ImportError("compiled backend not available")
        return _accel_mod
    raise ValueError(f"unknown backend {name!r}")
