"""Incidental-parameter bias estimators and the BC / IBC / SBC corrections.

For each individual the pieces below are evaluated at ``(theta, alpha_i(theta))``
with ``Sigma = (G_a' Omega^{-1} G_a)^{-1}``, ``H = Sigma G_a' Omega^{-1}`` and
``P = Omega^{-1} - Omega^{-1} G_a H``. ``U_t = sum_{j=0}^{l} g_{t-j}`` is the
one-sided window sum of the moments (two-sided for the one-step estimator).
In sums of the form ``T^{-1} sum_t A_t U_t`` the lags ``j >= 1`` use ``A_t``
centred at its time mean (see ``_lag_mean``).

Two-step estimator (``Omega`` the second-step weight)::

    a_I   = -1/2 sum_j G_aa_j Sigma[:, j] + T^{-1} sum_t G_a,t H U_t
    v_G   = T^{-1} sum_t G_a,t' P U_t
    v_Om  = T^{-1} sum_t g_t g_t' P U_t
    v_W   = sum_j dOmega/dalpha_j (H^W[j] - H[j])'
    B_lam = P a_I + H' v_G + P v_Om + P v_W
    B_alp = H a_I - Sigma v_G + H v_Om + H v_W
    B^B   = -G_theta' B_lam,   B^C = T^{-1} sum_t G_theta,t' P U_t

and ``B_s = n^{-1} sum_i (B^B + B^C)``, ``J = n^{-1} sum_i G_theta' P G_theta``,
``B = -J^{-1} B_s``. Corrections subtract ``B / T_bar``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NumericError
from .gmm import (FitReport, jacobian, map_ordered, projections, solve_all, theta_avar,
                  theta_standard_errors)
from .kernels import window_sum
from .linear_rc import default_trim
from .weighting import regularize

IBC_MAX_ITER = 100
CORRECTION_TOL = 1e-11


def trims(panel, ell=None) -> list[int]:
    """Per-individual trimming lags: ``ell`` if given, else ``floor(T_i^{1/3})``."""
    out = []
    for b in panel:
        l = default_trim(b.T) if ell is None else int(ell)
        if not 0 <= l <= b.T - 1:
            raise ValueError(f"trimming lag {l} out of range for individual {b.id} with T={b.T}")
        out.append(l)
    return out


def spectral_sum(a, b, ell: int, two_sided: bool = False) -> np.ndarray:
    """``sum_j T^{-1} sum_t a_t b_{t-j}`` over ``j = 0..ell`` (or ``-ell..ell``).

    ``a`` is ``(T, p)`` and ``b`` is ``(T, q)`` (outer products, result
    ``(p, q)``), or ``a`` is ``(T, p, q)`` and ``b`` is ``(T, q)`` (matrix-vector
    products, result ``(p,)``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    T = b.shape[0]
    if not 0 <= ell <= T - 1:
        raise ValueError(f"trimming lag {ell} out of range for T={T}")
    U = window_sum(b, ell, two_sided)
    if a.ndim == 2:
        return a.T @ U / T
    return np.einsum("tpq,tq->p", a, U) / T


@dataclass
class IndividualBias:
    id: str
    Sigma: np.ndarray
    H: np.ndarray
    P: np.ndarray
    H_W: np.ndarray | None
    B_lambda: dict
    B_alpha: dict
    B_B: np.ndarray
    B_C: np.ndarray
    B_V: np.ndarray
    ell: int
    Sigma_alpha: np.ndarray  # variance of sqrt(T)(alpha_hat - alpha)

    @property
    def B_alpha_total(self) -> np.ndarray:
        return sum(self.B_alpha.values())

    @property
    def B_lambda_total(self) -> np.ndarray:
        return sum(self.B_lambda.values())


@dataclass
class BiasBlocks:
    individuals: list[IndividualBias]
    B_s: np.ndarray
    J: np.ndarray
    one_step: bool
    ells: list[int] = field(default_factory=list)

    @property
    def B(self) -> np.ndarray:
        if self.J.size == 0:
            return np.zeros(0)
        return -np.linalg.solve(self.J, self.B_s)


def _arrays(block, model, theta, alpha):
    z = block.values
    g = np.asarray(model.g(z, theta, alpha), dtype=np.float64)
    Ga = np.asarray(model.G_alpha(z, theta, alpha), dtype=np.float64)
    Gt = np.asarray(model.G_theta(z, theta, alpha), dtype=np.float64)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(Ga)) and np.all(np.isfinite(Gt))):
        raise NumericError(f"non-finite moments or derivatives for individual {block.id}", ids=[block.id])
    return g, Ga, Gt


def _lag_mean(A_t, M, g, U):
    """``T^{-1} sum_t A_t M u_t`` where ``u_t`` is the lag window ``U_t``.

    The lag-0 part uses ``A_t`` as is; the other lags use ``A_t`` centred at
    its time mean. Both have the same expectation because the moments have
    mean zero, and centring removes truncation-edge terms that otherwise
    make the estimate nonzero when ``A_t`` is constant over time.
    """
    T = g.shape[0]
    A_c = A_t - A_t.mean(axis=0)
    return (np.einsum("tgk,tk->g", A_t, g @ M.T) + np.einsum("tgk,tk->g", A_c, (U - g) @ M.T)) / T


def _dOmega(Ga, g):
    """``d Omega_0 / d alpha_j = T^{-1} sum_t (G_a,t[:, j] g_t' + g_t G_a,t[:, j]')``, stacked on axis 0."""
    T = g.shape[0]
    X = np.einsum("tgj,th->jgh", Ga, g) / T
    return X + X.transpose(0, 2, 1)


def _two_step_individual(block, model, theta, alpha, weight, W_first, first_point, ell):
    d = model.dims
    g, Ga_t, Gt_t = _arrays(block, model, theta, alpha)
    Ga, Gt = Ga_t.mean(axis=0), Gt_t.mean(axis=0)
    Gaa = model.G_alphaalpha(block.values, theta, alpha).mean(axis=0)
    pr = projections(Ga, weight, block.id)
    Sigma, H, P = pr.Sigma, pr.H, pr.P
    T = g.shape[0]
    U = window_sum(g, ell)

    a_I = -0.5 * sum(Gaa[j * d.d_g:(j + 1) * d.d_g] @ Sigma[:, j] for j in range(d.d_alpha))
    a_I = a_I + _lag_mean(Ga_t, H, g, U)
    v_G = _lag_mean(Ga_t.transpose(0, 2, 1), P, g, U)
    v_Om = g.T @ np.einsum("tg,tg->t", g, U @ P) / T

    H_W = None
    v_W = np.zeros(d.d_g)
    if W_first is not None:
        H_W = projections(Ga, W_first, block.id).H
        th1, al1 = first_point
        g1, Ga1, _ = _arrays(block, model, th1, al1)
        dOm = _dOmega(Ga1, g1)
        v_W = sum(dOm[j] @ (H_W[j] - H[j]) for j in range(d.d_alpha))

    B_lam = {"I": P @ a_I, "G": H.T @ v_G, "Omega": P @ v_Om, "W": P @ v_W}
    B_alp = {"I": H @ a_I, "G": -Sigma @ v_G, "Omega": H @ v_Om, "W": H @ v_W}
    B_B = -Gt.T @ sum(B_lam.values())
    B_C = _lag_mean(Gt_t.transpose(0, 2, 1), P, g, U)
    return IndividualBias(block.id, Sigma, H, P, H_W, B_lam, B_alp, B_B, B_C,
                          np.zeros(d.d_theta), ell, Sigma), Gt.T @ P @ Gt


def _one_step_individual(block, model, theta, alpha, weight, ell):
    """Deterministic-weight bias pieces (no first-step estimation noise)."""
    d = model.dims
    dg, da = d.d_g, d.d_alpha
    g, Ga_t, Gt_t = _arrays(block, model, theta, alpha)
    Ga, Gt = Ga_t.mean(axis=0), Gt_t.mean(axis=0)
    Gaa = model.G_alphaalpha(block.values, theta, alpha).mean(axis=0)
    Gta = model.G_thetaalpha(block.values, theta, alpha).mean(axis=0)
    pr = projections(Ga, weight, block.id)
    Sigma, H, P = pr.Sigma, pr.H, pr.P
    T = g.shape[0]
    Omega = regularize(g.T @ g / T, f" for individual {block.id}")
    V_a = H @ Omega @ H.T
    HOP = H @ Omega @ P
    POH = P @ Omega @ H.T
    U = window_sum(g, ell, two_sided=True)

    a_I = -0.5 * sum(Gaa[j * dg:(j + 1) * dg] @ V_a[:, j] for j in range(da))
    a_I = a_I + _lag_mean(Ga_t, H, g, U)
    v_G = _lag_mean(Ga_t.transpose(0, 2, 1), P, g, U)
    # Hess(g_k)[a, b] = d^2 g_k / d alpha_a d alpha_b
    hess = Gaa.reshape(da, dg, da).transpose(1, 0, 2)
    v_1S = 0.5 * sum(Gaa[j * dg:(j + 1) * dg].T @ POH[:, j] for j in range(da))
    v_1S = v_1S + 0.5 * sum(hess[k] @ HOP[:, k] for k in range(dg))

    B_lam = {"I": P @ a_I, "G": H.T @ v_G, "Omega": np.zeros(dg), "W": -H.T @ v_1S}
    B_alp = {"I": H @ a_I, "G": -Sigma @ v_G, "Omega": np.zeros(da), "W": Sigma @ v_1S}
    B_B = -Gt.T @ sum(B_lam.values())
    B_C = _lag_mean(Gt_t.transpose(0, 2, 1), P, g, U)
    # M_k[a, b] = d^2 g_k / d theta_a d alpha_b
    M = Gta.reshape(da, dg, d.d_theta).transpose(1, 2, 0)
    B_V = -0.5 * sum(Gta[j * dg:(j + 1) * dg].T @ POH[:, j] for j in range(da))
    B_V = B_V - 0.5 * sum(M[k] @ HOP[:, k] for k in range(dg))
    if d.d_theta == 0:
        B_V = np.zeros(0)
    return IndividualBias(block.id, Sigma, H, P, H, B_lam, B_alp, B_B, B_C,
                          np.asarray(B_V, dtype=float).reshape(d.d_theta), ell, V_a), Gt.T @ P @ Gt


def bias_blocks(panel, model, theta, effects, ell=None, weights=None, first_weights=None,
                first_point=None, one_step: bool = False, workers: int = 1) -> BiasBlocks:
    """Per-individual bias pieces and their aggregates.

    ``weights`` are the weights of the fit being corrected (for the two-step
    estimator, the estimated moment covariances). ``first_weights`` and
    ``first_point = (theta_1, alphas_1)`` describe the first step that
    produced them; leave them ``None`` to drop the weight-estimation term.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    d = model.dims
    ells = trims(panel, ell)
    if weights is None:
        raise ValueError("bias_blocks needs the fit's weights")

    def one(k):
        b, e = panel[k], effects[k]
        if one_step:
            return _one_step_individual(b, model, theta, e.alpha, weights[k], ells[k])
        fw = None if first_weights is None else first_weights[k]
        fp = None if first_point is None else (first_point[0], first_point[1][k])
        return _two_step_individual(b, model, theta, e.alpha, weights[k], fw, fp, ells[k])

    res = map_ordered(one, range(panel.n), workers)
    inds = [r[0] for r in res]
    n = panel.n
    B_s = sum(ib.B_B + ib.B_C + ib.B_V for ib in inds) / n if d.d_theta else np.zeros(0)
    J = sum(r[1] for r in res) / n if d.d_theta else np.zeros((0, 0))
    J = 0.5 * (J + J.T) if d.d_theta else J
    return BiasBlocks(inds, np.asarray(B_s, dtype=float).reshape(d.d_theta), J, one_step, ells)


def jacobian_estimate(panel, model, theta, effects, weights) -> np.ndarray:
    """``n^{-1} sum_i G_theta_i' P_i G_theta_i``."""
    if model.dims.d_theta == 0:
        return np.zeros((0, 0))
    return jacobian(panel, model, np.asarray(theta, float).reshape(-1), effects, weights)


# -- bias estimators used by the correction engine ----------------------------

class GenericBias:
    """Bias from :func:`bias_blocks`, using the fit's weights and first step."""

    name = "general"

    def __init__(self, fit: FitReport, ell=None, workers: int = 1):
        self.fit, self.ell, self.workers = fit, ell, workers
        self.one_step = fit.step != "two-step"
        s1 = fit.stage1
        self.first_weights = None if (self.one_step or s1 is None) else s1.weights
        self.first_point = None if (self.one_step or s1 is None) else (s1.theta, s1.alphas)

    def blocks(self, theta, effects) -> BiasBlocks:
        key = np.asarray(theta, float).tobytes()
        memo = getattr(self, "_memo", None)
        if memo is None or memo[0] != key or memo[1] is not effects:
            self._memo = memo = (key, effects, self._blocks(theta, effects))
        return memo[2]

    def _blocks(self, theta, effects) -> BiasBlocks:
        f = self.fit
        return bias_blocks(f.panel, f.model, theta, effects, self.ell, f.weights, self.first_weights,
                           self.first_point, self.one_step, self.workers)

    def bias(self, theta, effects) -> np.ndarray:
        return self.blocks(theta, effects).B

    def score_bias(self, theta, effects) -> np.ndarray:
        return self.blocks(theta, effects).B_s

    def alpha_terms(self, theta, effects):
        bb = self.blocks(theta, effects)
        return [ib.Sigma_alpha for ib in bb.individuals], [ib.B_alpha_total for ib in bb.individuals]

    def _at(self, theta, effects):
        f = self.fit
        J = jacobian_estimate(f.panel, f.model, theta, effects, f.weights)
        return _refit(f, theta, effects, J)

    def theta_avar(self, theta, effects) -> np.ndarray:
        return theta_avar(self._at(theta, effects))

    def se(self, theta, effects) -> np.ndarray:
        return theta_standard_errors(self._at(theta, effects))


def _refit(fit, theta, effects, J):
    from dataclasses import replace

    return replace(fit, theta=np.asarray(theta, float), effects=tuple(effects), J=J)


def make_estimator(fit: FitReport, ell=None, bias_method: str = "auto", workers: int = 1):
    """``auto`` prefers a model-specific estimator when the model provides one."""
    if bias_method not in ("auto", "general", "model"):
        raise ValueError(f"unknown bias method {bias_method!r}")
    if bias_method in ("auto", "model"):
        factory = getattr(fit.model, "bias_estimator", None)
        est = factory(fit, ell) if factory is not None else None
        if est is not None:
            return est
        if bias_method == "model":
            raise ValueError(f"model {fit.model.name!r} has no model-specific bias estimator "
                             f"for this fit")
    return GenericBias(fit, ell, workers)


@dataclass(frozen=True)
class CorrectionResult:
    method: str
    theta: np.ndarray
    iterations: int
    effects: tuple
    bias: np.ndarray
    se: np.ndarray
    residual: float
    fit: FitReport = field(repr=False, compare=False)
    estimator: object = field(default=None, repr=False, compare=False)
    residual_trace: tuple = ()

    @property
    def alphas(self) -> np.ndarray:
        return np.array([e.alpha for e in self.effects])


def _effects_at(fit, theta, inits=None):
    if np.array_equal(theta, fit.theta):
        return fit.effects
    inits = list(fit.alphas) if inits is None else inits
    return solve_all(fit.panel, fit.model, theta, fit.weights, inits)


def correct_bc(fit: FitReport, ell=None, bias_method: str = "auto", workers: int = 1) -> CorrectionResult:
    """``theta_BC = theta_hat - B(theta_hat) / T_bar``, effects re-solved at ``theta_BC``."""
    est = make_estimator(fit, ell, bias_method, workers)
    B = est.bias(fit.theta, fit.effects)
    theta = fit.theta - B / fit.panel.T_bar
    effects = _effects_at(fit, theta)
    return CorrectionResult("BC", theta, 1, effects, B, est.se(theta, effects), 0.0, fit, est)


def correct_ibc(fit: FitReport, ell=None, bias_method: str = "auto", tol: float = CORRECTION_TOL,
                max_iter: int = IBC_MAX_ITER, workers: int = 1) -> CorrectionResult:
    """Fixed point of ``theta = theta_hat - B(theta) / T_bar`` by damped iteration from BC."""
    est = make_estimator(fit, ell, bias_method, workers)
    Tb = fit.panel.T_bar
    theta = fit.theta - est.bias(fit.theta, fit.effects) / Tb
    effects = _effects_at(fit, theta)
    damp, prev, trace = 1.0, np.inf, []
    for it in range(1, max_iter + 1):
        B = est.bias(theta, effects)
        target = fit.theta - B / Tb
        r = float(np.max(np.abs(theta - target))) if theta.size else 0.0
        trace.append(r)
        if r < tol * (1.0 + float(np.max(np.abs(theta), initial=0.0))):
            return CorrectionResult("IBC", theta, it, effects, B, est.se(theta, effects), r, fit, est,
                                    tuple(trace))
        if r > prev:
            damp *= 0.5
        prev = r
        theta = theta + damp * (target - theta)
        effects = _effects_at(fit, theta, [e.alpha for e in effects])
    raise ConvergenceError(f"iterated correction did not converge in {max_iter} iterations "
                           f"(residual {trace[-1]:.3e})", last=theta, trajectory=trace)


def correct_sbc(fit: FitReport, ell=None, bias_method: str = "auto", tol: float = CORRECTION_TOL,
                max_iter: int = IBC_MAX_ITER, workers: int = 1) -> CorrectionResult:
    """Root of the corrected score ``s(theta) - B_s(theta) / T_bar`` by quasi-Newton with ``J``."""
    from .gmm import _score

    est = make_estimator(fit, ell, bias_method, workers)
    panel, model = fit.panel, fit.model
    Tb = panel.T_bar
    theta = fit.theta.copy()
    effects = fit.effects
    trace = []
    for it in range(1, max_iter + 1):
        J = jacobian_estimate(panel, model, theta, effects, fit.weights)
        B = est.bias(theta, effects)
        # B_s = -J B, so the corrected score is s + J B / T_bar
        r_vec = _score(panel, model, theta, effects) + J @ B / Tb
        r = float(np.max(np.abs(r_vec))) if r_vec.size else 0.0
        trace.append(r)
        if r < tol * (1.0 + float(np.max(np.abs(theta), initial=0.0))):
            return CorrectionResult("SBC", theta, it, effects, B, est.se(theta, effects), r, fit, est,
                                    tuple(trace))
        theta = theta - np.linalg.solve(J, r_vec)
        effects = _effects_at(fit, theta, [e.alpha for e in effects])
    raise ConvergenceError(f"score-corrected solve did not converge in {max_iter} iterations "
                           f"(residual {trace[-1]:.3e})", last=theta, trajectory=trace)


CORRECTIONS = {"bc": correct_bc, "ibc": correct_ibc, "sbc": correct_sbc}


def correct(fit: FitReport, method: str, ell=None, bias_method: str = "auto", workers: int = 1):
    method = method.lower()
    if method == "none":
        return None
    try:
        fn = CORRECTIONS[method]
    except KeyError:
        raise ValueError(f"unknown correction {method!r}") from None
    return fn(fit, ell, bias_method, workers=workers)


__all__ = [
    "BiasBlocks", "IndividualBias", "CorrectionResult", "GenericBias",
    "bias_blocks", "correct", "correct_bc", "correct_ibc", "correct_sbc", "jacobian_estimate",
    "make_estimator", "spectral_sum", "trims",
]
