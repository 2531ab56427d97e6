"""Moment autocovariances and weighting matrices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericError, WeightingError

RIDGE_TRIGGER = 1e-10
RIDGE_SIZE = 1e-8


@dataclass(frozen=True)
class WeightMatrix:
    """A symmetric positive-definite ``d_g x d_g`` weight.

    ``kind`` is one of ``"identity"``, ``"user"`` or ``"optimal"``.
    """

    W: np.ndarray
    kind: str = "user"

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, ndmin=2)
        if W.shape[0] != W.shape[1]:
            raise WeightingError(f"weight must be square, got {W.shape}")
        if not np.allclose(W, W.T, rtol=0, atol=1e-12 * max(1.0, np.abs(W).max())):
            raise WeightingError("weight matrix is not symmetric")
        W = 0.5 * (W + W.T)
        try:
            chol = sla.cho_factor(W, lower=True)
        except sla.LinAlgError:
            raise WeightingError("weight matrix is not positive definite") from None
        if self.kind not in ("identity", "user", "optimal"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def identity(cls, d_g: int) -> WeightMatrix:
        return cls(np.eye(d_g), "identity")

    def solve(self, b) -> np.ndarray:
        """``W^{-1} b``."""
        return sla.cho_solve(self._chol, np.asarray(b, dtype=np.float64))

    @property
    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.W.shape[0]))

    def scaled(self, c: float) -> WeightMatrix:
        return WeightMatrix(c * self.W, self.kind)


def lag_products(g: np.ndarray, j: int) -> np.ndarray:
    """``T^{-1} sum_{t>j} g_t g_{t-j}'`` for a ``(T, d)`` array."""
    T = g.shape[0]
    if not 0 <= j <= T - 1:
        raise ValueError(f"lag {j} out of range for T={T}")
    return g[j:].T @ g[:T - j] / T


def autocovariance(block, model, theta, alpha, j: int) -> np.ndarray:
    """Lag-``j`` sample autocovariance of the moments, divided by ``T_i``."""
    if not 0 <= j <= block.T - 1:
        raise ValueError(f"lag {j} out of range for individual {block.id} with T={block.T}")
    g = np.asarray(model.g(block.values, theta, alpha), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite moment for individual {block.id}", ids=[block.id])
    return lag_products(g, j)


def regularize(omega: np.ndarray, label: str = "") -> np.ndarray:
    """Add a small ridge when ``omega`` is numerically singular."""
    omega = 0.5 * (omega + omega.T)
    d = omega.shape[0]
    scale = np.trace(omega) / d
    if not np.isfinite(scale) or scale <= 0:
        raise WeightingError(f"moment covariance{label} is zero or non-finite")
    if np.linalg.eigvalsh(omega)[0] < RIDGE_TRIGGER * scale:
        warnings.warn(f"moment covariance{label} is near-singular; adding ridge", RuntimeWarning, stacklevel=3)
        omega = omega + RIDGE_SIZE * scale * np.eye(d)
    return omega


def optimal_weight(block, model, theta, alpha) -> WeightMatrix:
    """Lag-0 moment covariance at preliminary estimates, ridge-regularised."""
    omega = regularize(autocovariance(block, model, theta, alpha, 0), f" for individual {block.id}")
    try:
        return WeightMatrix(omega, "optimal")
    except WeightingError:
        raise WeightingError(f"moment covariance for individual {block.id} is not positive definite",
                             ids=[block.id]) from None
