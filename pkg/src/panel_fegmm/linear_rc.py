"""Closed forms for the linear correlated random-coefficient IV model.

Per individual, ``y = X1 alpha_i + X2 theta + e`` with instruments
``W = (X1, W2)``. A tilde denotes the residual from the individual's
least-squares projection on ``X1``. With weights ``S_ww = T^{-1} W'W`` the
FE-GMM estimator of ``theta`` is a pooled 2SLS on residualised data:

    theta = (sum_i T_i^{-1} X2~' P_i X2~)^{-1} sum_i T_i^{-1} X2~' P_i y~,

where ``P_i`` projects on the columns of ``W2~``. Per-individual sums are
scaled by ``1/T_i`` so unbalanced panels weight individuals equally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WeakIdentificationError
from .kernels import window_sum
from .moments import LinearRCIV
from .panel import PanelDataset
from .weighting import WeightMatrix

WEAK_COND = 1e12


def default_trim(T: int) -> int:
    return int(np.floor(T ** (1.0 / 3.0) + 1e-12))


def _checked_inverse(A, id_, what):
    A = 0.5 * (A + A.T)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > WEAK_COND:
        raise WeakIdentificationError(f"{what} is singular for individual {id_}", ids=[id_])
    return np.linalg.inv(A)


@dataclass(frozen=True)
class IndividualRC:
    id: str
    y: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    W2: np.ndarray
    X1tX1_inv: np.ndarray
    y_t: np.ndarray
    X2_t: np.ndarray
    W2_t: np.ndarray
    fitted_x2: np.ndarray  # projection of X2~ on W2~

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def W(self) -> np.ndarray:
        return np.hstack([self.X1, self.W2])


def _residualize(A, X1, X1tX1_inv):
    return A - X1 @ (X1tX1_inv @ (X1.T @ A))


def individual_data(block, model: LinearRCIV) -> IndividualRC:
    y, X1, X2, W2 = model.split(block.values)
    inv = _checked_inverse(X1.T @ X1, block.id, "X1'X1")
    y_t = _residualize(y, X1, inv)
    X2_t = _residualize(X2, X1, inv)
    W2_t = _residualize(W2, X1, inv)
    if W2_t.shape[1] > 0:
        Sww_inv = _checked_inverse(W2_t.T @ W2_t, block.id, "W2~'W2~ (weak instruments)")
        fitted = W2_t @ (Sww_inv @ (W2_t.T @ X2_t))
    else:
        fitted = np.zeros_like(X2_t)
    return IndividualRC(block.id, y, X1, X2, W2, inv, y_t, X2_t, W2_t, fitted)


@dataclass(frozen=True)
class LinearRCData:
    """Per-individual arrays and their residualised versions."""

    individuals: tuple[IndividualRC, ...]
    d_g: int
    d_alpha: int
    d_theta: int

    @classmethod
    def from_panel(cls, panel: PanelDataset, model: LinearRCIV) -> LinearRCData:
        inds = tuple(individual_data(b, model) for b in panel)
        d = model.dims
        return cls(inds, d.d_g, d.d_alpha, d.d_theta)

    @property
    def n(self) -> int:
        return len(self.individuals)

    @property
    def T_bar(self) -> float:
        return float(np.mean([ind.T for ind in self.individuals]))

    def trims(self, ell=None) -> list[int]:
        if ell is None:
            return [default_trim(ind.T) for ind in self.individuals]
        return [int(ell)] * self.n


def closed_form_alpha(ind: IndividualRC, theta) -> np.ndarray:
    """``(X1'X1)^{-1} X1'(y - X2 theta)``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    return ind.X1tX1_inv @ (ind.X1.T @ (ind.y - ind.X2 @ theta))


def jacobian_w(data: LinearRCData) -> np.ndarray:
    """``n^{-1} sum_i T_i^{-1} X2~' P_i X2~``."""
    J = sum(ind.fitted_x2.T @ ind.X2_t / ind.T for ind in data.individuals) / data.n
    return 0.5 * (J + J.T)


def closed_form_theta(data: LinearRCData) -> np.ndarray:
    J = jacobian_w(data)
    b = sum(ind.fitted_x2.T @ ind.y_t / ind.T for ind in data.individuals) / data.n
    return np.linalg.solve(J, b)


def _spectral_cross(a, b, ell):
    """``sum_{j=-ell}^{ell} sum_t a_t b_{t-j}'`` for ``(T, p)``, ``(T, q)`` arrays."""
    # two-sided window sum of b, then an inner product with a
    bw = window_sum(b, ell, two_sided=True)
    return a.T @ bw


def bias_terms(data: LinearRCData, ell=None) -> tuple[np.ndarray, np.ndarray]:
    """``c = n^{-1} sum_i T_i^{-1} S(x2~, y~)`` and ``M = n^{-1} sum_i T_i^{-1} S(x2~, x2~)``.

    ``S`` is the two-sided trimmed cross sum. The score bias at ``theta`` is
    ``B_s(theta) = -(d_g - d_alpha) (c - M theta)``.
    """
    d_t = data.d_theta
    c = np.zeros(d_t)
    M = np.zeros((d_t, d_t))
    for ind, l in zip(data.individuals, data.trims(ell)):
        l = min(l, ind.T - 1)
        c += _spectral_cross(ind.X2_t, ind.y_t[:, None], l)[:, 0] / ind.T
        M += _spectral_cross(ind.X2_t, ind.X2_t, l) / ind.T
    return c / data.n, M / data.n


def closed_form_score_bias(data: LinearRCData, theta, ell=None) -> np.ndarray:
    c, M = bias_terms(data, ell)
    return -(data.d_g - data.d_alpha) * (c - M @ np.asarray(theta, dtype=float).reshape(-1))


def closed_form_bias(data: LinearRCData, theta, ell=None) -> np.ndarray:
    """``B(theta) = -J^{-1} B_s(theta)``; the correction subtracts ``B/T_bar``."""
    return -np.linalg.solve(jacobian_w(data), closed_form_score_bias(data, theta, ell))


def closed_form_bc(data: LinearRCData, ell=None) -> np.ndarray:
    theta = closed_form_theta(data)
    return theta - closed_form_bias(data, theta, ell) / data.T_bar


def closed_form_ibc(data: LinearRCData, ell=None) -> np.ndarray:
    """One-shot solution of ``theta = theta_hat - B(theta)/T_bar``.

    With ``B(theta) = d J^{-1}(c - M theta)``, ``d = d_g - d_alpha``:
    ``theta = [I - d J^{-1} M / T_bar]^{-1} [theta_hat - d J^{-1} c / T_bar]``.
    """
    theta_hat = closed_form_theta(data)
    J = jacobian_w(data)
    c, M = bias_terms(data, ell)
    d = data.d_g - data.d_alpha
    A = np.eye(data.d_theta) - d * np.linalg.solve(J, M) / data.T_bar
    rhs = theta_hat - d * np.linalg.solve(J, c) / data.T_bar
    if np.linalg.cond(A) > WEAK_COND:
        raise WeakIdentificationError("iterated-correction matrix is singular")
    return np.linalg.solve(A, rhs)


def instrument_weights(data: LinearRCData) -> tuple[WeightMatrix, ...]:
    """``S_ww = T_i^{-1} W'W`` per individual, the weights behind the closed forms."""
    return tuple(WeightMatrix(ind.W.T @ ind.W / ind.T, "user") for ind in data.individuals)


def residual_variances(data: LinearRCData, theta) -> np.ndarray:
    """``sigma_i^2 = T_i^{-1} sum_t e_it^2`` at ``theta`` and ``alpha_i(theta)``."""
    out = []
    for ind in data.individuals:
        e = ind.y_t - ind.X2_t @ np.asarray(theta, dtype=float).reshape(-1)
        out.append(float(e @ e) / ind.T)
    return np.array(out)


def homoskedastic_sigma_alpha(data: LinearRCData, theta) -> list[np.ndarray]:
    """``Sigma_alpha_i = sigma_i^2 (X1'X1 / T_i)^{-1}``."""
    s2 = residual_variances(data, theta)
    return [s * ind.T * ind.X1tX1_inv for s, ind in zip(s2, data.individuals)]


def homoskedastic_theta_avar(data: LinearRCData, theta) -> np.ndarray:
    """Sandwich variance of ``sqrt(n T_bar)(theta_hat - theta)`` with ``Omega_i = sigma_i^2 S_ww``."""
    s2 = residual_variances(data, theta)
    J = jacobian_w(data)
    V = sum(s * ind.fitted_x2.T @ ind.X2_t / ind.T for s, ind in zip(s2, data.individuals)) / data.n
    Jinv = np.linalg.inv(J)
    return Jinv @ V @ Jinv


def homoskedastic_theta_se(data: LinearRCData, theta) -> np.ndarray:
    avar = homoskedastic_theta_avar(data, theta)
    return np.sqrt(np.clip(np.diag(avar), 0, None) / (data.n * data.T_bar))


class LinearRCBias:
    """Closed-form bias for the correction engine.

    Uses the two-sided trimmed sums and ``S_ww`` weights of the closed forms;
    the effects' bias is zero and their variance is the homoskedastic
    ``sigma_i^2 (X1'X1/T_i)^{-1}``.
    """

    name = "model"

    def __init__(self, fit, ell=None):
        self.fit, self.ell = fit, ell
        self.data = LinearRCData.from_panel(fit.panel, fit.model)

    def score_bias(self, theta, effects=None) -> np.ndarray:
        return closed_form_score_bias(self.data, theta, self.ell)

    def bias(self, theta, effects=None) -> np.ndarray:
        return closed_form_bias(self.data, theta, self.ell)

    def alpha_terms(self, theta, effects=None):
        sig = homoskedastic_sigma_alpha(self.data, theta)
        return sig, [np.zeros(self.data.d_alpha) for _ in sig]

    def theta_avar(self, theta, effects=None) -> np.ndarray:
        return homoskedastic_theta_avar(self.data, theta)

    def se(self, theta, effects=None) -> np.ndarray:
        return homoskedastic_theta_se(self.data, theta)


# -- pooled fixed-coefficient estimators --------------------------------------

@dataclass(frozen=True)
class PooledFit:
    """Pooled within estimates: ``theta`` for ``x2``, ``slope`` for the non-constant ``x1`` columns."""

    theta: np.ndarray
    theta_se: np.ndarray
    slope: np.ndarray
    slope_se: np.ndarray


def _within(panel, model):
    ys, Xs, Zs = [], [], []
    for b in panel:
        y, X1, X2, W2 = model.split(b.values)
        const = np.all(X1 == X1[:1], axis=0)
        Xv = X1[:, ~const]
        X = np.hstack([Xv, X2])
        Z = np.hstack([Xv, W2])
        ys.append(y - y.mean())
        Xs.append(X - X.mean(axis=0))
        Zs.append(Z - Z.mean(axis=0))
        k_slope = Xv.shape[1]
    return np.concatenate(ys), np.vstack(Xs), np.vstack(Zs), k_slope


def _pooled(panel, model, iv):
    y, X, Z, k = _within(panel, model)
    N = y.shape[0]
    if iv:
        if Z.shape[1] < X.shape[1]:
            raise WeakIdentificationError("pooled IV needs at least as many instruments as regressors")
        Xh = Z @ np.linalg.lstsq(Z, X, rcond=None)[0]
    else:
        Xh = X
    A = Xh.T @ X
    if np.linalg.cond(A) > WEAK_COND:
        raise WeakIdentificationError("pooled regression is not identified")
    coef = np.linalg.solve(A, Xh.T @ y)
    e = y - X @ coef
    dof = N - panel.n - X.shape[1]
    s2 = float(e @ e) / max(dof, 1)
    cov = s2 * np.linalg.inv(Xh.T @ Xh)
    se = np.sqrt(np.diag(cov))
    return PooledFit(coef[k:], se[k:], coef[:k], se[:k])


def pooled_fc_ols(panel: PanelDataset, model: LinearRCIV) -> PooledFit:
    """Within OLS of ``y`` on the non-constant ``x1`` columns and ``x2``, homoskedastic SEs."""
    return _pooled(panel, model, iv=False)


def pooled_fc_iv(panel: PanelDataset, model: LinearRCIV) -> PooledFit:
    """Within 2SLS with instruments (non-constant ``x1``, ``w2``), homoskedastic SEs."""
    return _pooled(panel, model, iv=True)


def ols_limit(alpha1, cov_eps_v, mean_pi1, var_z, cov_alpha_pi, var_x):
    """Probability limit of pooled OLS of the slope when it is heterogeneous."""
    return alpha1 + (cov_eps_v + 2 * mean_pi1 * var_z * cov_alpha_pi) / var_x


def iv_limit(alpha1, cov_alpha_pi, mean_pi1, var_pi1=None):
    """Probability limit of pooled IV of a heterogeneous slope.

    Without ``var_pi1``: ``alpha1 + Cov[alpha1, pi1] / E[pi1]``. With it, the
    heterogeneous-first-stage version
    ``alpha1 + 2 E[pi1] Cov[alpha1, pi1] / (E[pi1]^2 + Var[pi1])``.
    """
    if var_pi1 is None:
        return alpha1 + cov_alpha_pi / mean_pi1
    return alpha1 + 2 * mean_pi1 * cov_alpha_pi / (mean_pi1 ** 2 + var_pi1)
