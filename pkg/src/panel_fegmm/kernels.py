"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when importable; set
``PANEL_FEGMM_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
active implementation.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("PANEL_FEGMM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError
    from . import _kernels_c
except ImportError:
    _kernels_c = None

BACKEND = "cython" if _kernels_c is not None else "python"

# below this many scalar ops the numpy path is at least as fast
_SMALL = 64


def window_sum(u, ell: int, two_sided: bool = False, backend: str | None = None) -> np.ndarray:
    """Lag-window sums along axis 0 of ``u`` (see ``_kernels_py.window_sum``)."""
    u = np.asarray(u, dtype=np.float64)
    if ell < 0:
        raise ValueError(f"trimming lag must be >= 0, got {ell}")
    if _use_c(backend, u.size):
        shape = u.shape
        flat = np.ascontiguousarray(u.reshape(1, shape[0], -1))
        return _kernels_c.window_sum_3d(flat, int(ell), bool(two_sided)).reshape(shape)
    return _kernels_py.window_sum(u, ell, two_sided)


def window_sum_batch(u, ell: int, two_sided: bool = False, backend: str | None = None) -> np.ndarray:
    """Lag-window sums along axis 1 of an ``(n, T, ...)`` array."""
    u = np.asarray(u, dtype=np.float64)
    if ell < 0:
        raise ValueError(f"trimming lag must be >= 0, got {ell}")
    if _use_c(backend, u.size):
        shape = u.shape
        flat = np.ascontiguousarray(u.reshape(shape[0], shape[1], -1))
        return _kernels_c.window_sum_3d(flat, int(ell), bool(two_sided)).reshape(shape)
    return _kernels_py.window_sum_batch(u, ell, two_sided)


def geometric_filter(x, rho: float, nterms: int, start: int, forward: bool,
                     backend: str | None = None) -> np.ndarray:
    """Truncated geometric sums along the last axis (see ``_kernels_py``)."""
    x = np.asarray(x, dtype=np.float64)
    if _use_c(backend, x.size * nterms):
        shape = x.shape
        flat = np.ascontiguousarray(x.reshape(-1, shape[-1]))
        out = _kernels_c.geometric_filter_2d(flat, float(rho), int(nterms), int(start), bool(forward))
        return out.reshape(shape[:-1] + (out.shape[-1],))
    return _kernels_py.geometric_filter(x, rho, nterms, start, forward)


def _use_c(backend: str | None, size: int) -> bool:
    if backend == "python":
        return False
    if backend == "cython":
        if _kernels_c is None:
            raise RuntimeError("compiled kernels are not built")
        return True
    return _kernels_c is not None and size >= _SMALL
