"""Pure numpy versions of the lag-window and geometric-filter kernels.

These are the fallback when the compiled ``_kernels_c`` extension is not
built. Both implementations must agree to rounding.
"""

from __future__ import annotations

import numpy as np


def window_sum(u: np.ndarray, ell: int, two_sided: bool = False) -> np.ndarray:
    """Lag-window sums of the rows of ``u``.

    One-sided: ``U[t] = sum_{j=0}^{min(ell, t)} u[t - j]``.
    Two-sided: ``U[t] = sum_{j=-ell}^{ell} u[t - j]`` over valid indices.

    ``u`` has time on axis 0 (shape ``(T, ...)``) or, for batches, on axis 1
    (shape ``(n, T, ...)``) when called through :func:`window_sum_batch`.
    """
    u = np.asarray(u, dtype=np.float64)
    T = u.shape[0]
    ell = int(ell)
    c = np.concatenate([np.zeros((1,) + u.shape[1:]), np.cumsum(u, axis=0)], axis=0)
    t = np.arange(T)
    lo = np.maximum(t - ell, 0)
    hi = np.minimum(t + ell, T - 1) if two_sided else t
    return c[hi + 1] - c[lo]


def window_sum_batch(u: np.ndarray, ell: int, two_sided: bool = False) -> np.ndarray:
    """:func:`window_sum` applied to each ``u[i]`` of an ``(n, T, q)`` array."""
    u = np.asarray(u, dtype=np.float64)
    c = np.concatenate([np.zeros((u.shape[0], 1) + u.shape[2:]), np.cumsum(u, axis=1)], axis=1)
    T = u.shape[1]
    t = np.arange(T)
    lo = np.maximum(t - int(ell), 0)
    hi = np.minimum(t + int(ell), T - 1) if two_sided else t
    return c[:, hi + 1] - c[:, lo]


def geometric_filter(x: np.ndarray, rho: float, nterms: int, start: int, forward: bool) -> np.ndarray:
    """Truncated geometric sums along the last axis.

    Forward:  ``y[..., t] = sum_{s=start}^{start+nterms-1} rho**s * x[..., t + s]``
    Backward: ``y[..., t] = sum_{s=start}^{start+nterms-1} rho**s * x[..., t - s]``

    Output position ``t`` is only filled where every referenced index is in
    range; the result has length ``L - (start + nterms - 1)``. For the
    forward filter output ``k`` corresponds to input ``t = k``; for the
    backward filter to input ``t = k + start + nterms - 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    span = start + nterms - 1
    m = L - span
    if m <= 0:
        raise ValueError("series too short for the requested number of terms")
    out = np.zeros(x.shape[:-1] + (m,))
    for s in range(start, start + nterms):
        w = rho ** s
        if forward:
            out += w * x[..., s:s + m]
        else:
            out += w * x[..., span - s:span - s + m]
    return out
