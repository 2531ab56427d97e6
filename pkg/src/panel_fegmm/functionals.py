"""Averages over data (``zeta``) and smooth functions of the effects (``mu``).

Both are plug-in estimators evaluated at a fit or at a corrected fit, with
analytic bias corrections and standard errors. A ``mu`` estimate averages
``mu(alpha_i)`` over individuals; a ``zeta`` estimate averages
``zeta(z_it; theta, alpha_i)`` over individuals and periods.
"""

from __future__ import annotations

import warnings
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .bias import CorrectionResult, make_estimator, trims
from .gmm import FitReport, projections, sample_jacobians
from .kernels import window_sum

FD_STEP = 1e-6
FD_STEP_SECOND = 1e-4


@dataclass(frozen=True)
class FunctionalEstimate:
    """``estimate`` is ``corrected`` when a correction was applied, else ``point``."""

    name: str
    point: float
    bias: float
    corrected: float
    variance: float
    se: float
    estimate: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("name", "point", "bias", "corrected", "variance", "se",
                                             "estimate")}


# -- mu functionals -----------------------------------------------------------

def _fd_grad(f, x, h=FD_STEP):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    for k in range(x.size):
        s = h * (1.0 + abs(x[k]))
        e = np.zeros(x.size)
        e[k] = s
        out[k] = (f(x + e) - f(x - e)) / (2 * s)
    return out


def _fd_hess(f, x, h=FD_STEP_SECOND):
    x = np.asarray(x, dtype=float)
    d = x.size
    out = np.empty((d, d))
    steps = h * (1.0 + np.abs(x))
    for a in range(d):
        for b in range(d):
            ea, eb = np.zeros(d), np.zeros(d)
            ea[a], eb[b] = steps[a], steps[b]
            out[a, b] = (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (
                4 * steps[a] * steps[b])
    return out


@dataclass(frozen=True)
class MuFunctional:
    """``mu(alpha) -> float`` with optional analytic derivatives.

    Derivatives default to central finite differences.
    """

    name: str
    mu: Callable
    mu_alpha: Callable | None = None
    mu_alphaalpha: Callable | None = None
    #: set when the callables also accept an ``(n, d_alpha)`` array and return
    #: ``(n,)``, ``(n, d_alpha)`` and ``(n, d_alpha, d_alpha)``
    vectorized: bool = False

    def values(self, A):
        if self.vectorized:
            return np.asarray(self.mu(A), dtype=float).reshape(A.shape[0])
        return np.array([self.value(a) for a in A])

    def grads(self, A):
        if self.vectorized and self.mu_alpha is not None:
            return np.asarray(self.mu_alpha(A), dtype=float).reshape(A.shape)
        return np.array([self.grad(a) for a in A])

    def hesss(self, A):
        if self.vectorized and self.mu_alphaalpha is not None:
            return np.asarray(self.mu_alphaalpha(A), dtype=float).reshape(A.shape + A.shape[1:])
        return np.array([self.hess(a) for a in A])

    def value(self, a):
        return float(self.mu(np.asarray(a, dtype=float)))

    def grad(self, a):
        if self.mu_alpha is not None:
            return np.asarray(self.mu_alpha(np.asarray(a, float)), dtype=float).reshape(-1)
        return _fd_grad(self.mu, a)

    def hess(self, a):
        if self.mu_alphaalpha is not None:
            h = np.asarray(self.mu_alphaalpha(np.asarray(a, float)), dtype=float)
            return h.reshape(len(np.atleast_1d(a)), -1)
        return _fd_hess(self.mu, a)


@dataclass(frozen=True)
class SdEffect:
    """Standard deviation of one component of the effects.

    Estimated through the variance functional ``(alpha_k - m)^2`` with ``m``
    the plug-in mean of ``alpha_k``, held fixed when differentiating, then
    mapped through the square root by the delta method.
    """

    k: int = 0
    ddof: int = 0

    @property
    def name(self) -> str:
        return f"sd_effect[{self.k}]"


def builtin_mean_effect(k: int = 0) -> MuFunctional:
    def mu(a):
        return a[..., k]

    def grad(a):
        e = np.zeros(np.shape(a))
        e[..., k] = 1.0
        return e

    def hess(a):
        d = np.shape(a)[-1]
        return np.zeros(np.shape(a)[:-1] + (d, d))

    return MuFunctional(f"mean_effect[{k}]", mu, grad, hess, vectorized=True)


def builtin_sd_effect(k: int = 0, ddof: int = 0) -> SdEffect:
    return SdEffect(k, ddof)


def variance_functional(k: int, center: float) -> MuFunctional:
    def mu(a):
        return (a[..., k] - center) ** 2

    def grad(a):
        e = np.zeros(np.shape(a))
        e[..., k] = 2.0 * (a[..., k] - center)
        return e

    def hess(a):
        d = np.shape(a)[-1]
        h = np.zeros(np.shape(a)[:-1] + (d, d))
        h[..., k, k] = 2.0
        return h

    return MuFunctional(f"var_effect[{k}]", mu, grad, hess, vectorized=True)


def _source(fit, correction, ell, bias_method):
    if correction is not None:
        est = correction.estimator or make_estimator(fit, ell, bias_method)
        return correction.theta, correction.effects, est
    return fit.theta, fit.effects, make_estimator(fit, ell, bias_method)


def mu_core(alphas, Sigmas, B_alphas, T_i, T_bar, mu: MuFunctional, corrected: bool):
    """Array-level estimate for ``mu`` given effects and their bias/variance pieces.

    Returns ``(point, bias, corrected_value, variance)`` where ``variance``
    estimates the asymptotic variance of ``sqrt(n)(estimate - mu)``.
    """
    A = np.asarray(alphas, dtype=float)
    A = A.reshape(A.shape[0], -1)
    S = np.asarray(Sigmas, dtype=float).reshape(A.shape + A.shape[1:])
    Bv = np.asarray(B_alphas, dtype=float).reshape(A.shape)
    vals, grads, hesss = mu.values(A), mu.grads(A), mu.hesss(A)
    gB = np.einsum("na,na->n", grads, Bv)
    trHS = np.einsum("nab,nba->n", hesss, S)
    gSg = np.einsum("na,nab,nb->n", grads, S, grads)
    point = float(vals.mean())
    bias = float(np.mean(gB + 0.5 * trHS))
    dev = vals - point
    dispersion = float(np.mean(dev ** 2))
    if corrected:
        # the dispersion is itself a mu-type average: nu = (mu - mean)^2
        nu_B = 2 * dev * gB + gSg + dev * trHS
        dispersion = dispersion - float(nu_B.mean()) / T_bar
        if dispersion < 0:
            warnings.warn("bias-corrected dispersion is negative; flooring at zero", RuntimeWarning,
                          stacklevel=3)
            dispersion = 0.0
    extra = float(np.mean(gSg / np.asarray(T_i, dtype=float)))
    variance = dispersion + extra
    return point, bias, point - bias / T_bar, variance


def estimate_mu(fit: FitReport, mu, correction: CorrectionResult | None = None, ell=None,
                bias_method: str = "auto") -> FunctionalEstimate:
    """Plug-in, bias term, corrected value and SE for a ``mu`` functional.

    Without ``correction`` the point estimate at the fit is reported and the
    variance uses the raw dispersion of ``mu(alpha_i)``. With a correction
    the effects are those re-solved at the corrected ``theta``, and the
    dispersion inside the variance is bias-corrected as well.
    """
    if isinstance(mu, SdEffect):
        return estimate_sd(fit, mu, correction, ell, bias_method)
    theta, effects, est = _source(fit, correction, ell, bias_method)
    alphas = np.array([e.alpha for e in effects])
    Sig, Ba = est.alpha_terms(theta, effects)
    panel = fit.panel
    point, bias, corr, var = mu_core(alphas, Sig, Ba, panel.T_i, panel.T_bar, mu, correction is not None)
    se = float(np.sqrt(var / panel.n))
    return FunctionalEstimate(mu.name, point, bias, corr, var, se, corr if correction is not None else point)


def estimate_sd(fit: FitReport, sd: SdEffect, correction: CorrectionResult | None = None, ell=None,
                bias_method: str = "auto") -> FunctionalEstimate:
    theta, effects, est = _source(fit, correction, ell, bias_method)
    alphas = np.array([e.alpha for e in effects])
    n = alphas.shape[0]
    center = float(alphas[:, sd.k].mean())
    Sig, Ba = est.alpha_terms(theta, effects)
    panel = fit.panel
    point, bias, corr, var = mu_core(alphas, Sig, Ba, panel.T_i, panel.T_bar,
                                     variance_functional(sd.k, center), correction is not None)
    if sd.ddof:
        point = point * n / (n - sd.ddof)
        corr = point - bias / panel.T_bar
    se2 = float(np.sqrt(var / n))
    s_point = float(np.sqrt(max(point, 0.0)))
    s_corr = float(np.sqrt(max(corr, 0.0)))
    s = s_corr if correction is not None else s_point
    se = se2 / (2 * s) if s > 0 else float("inf")
    return FunctionalEstimate(sd.name, s_point, s_point - s_corr, s_corr, var, se, s)


# -- zeta functionals ---------------------------------------------------------

@dataclass(frozen=True)
class ZetaFunctional:
    """``zeta(z, theta, alpha) -> (T,)`` over the rows of ``z``.

    ``zeta_alpha``/``zeta_theta`` return ``(T, d)`` and ``zeta_alphaalpha``
    returns ``(T, d_alpha, d_alpha)``. Missing derivatives are taken by
    central finite differences.
    """

    name: str
    zeta: Callable
    zeta_alpha: Callable | None = None
    zeta_theta: Callable | None = None
    zeta_alphaalpha: Callable | None = None

    def value(self, z, theta, alpha):
        return np.asarray(self.zeta(z, theta, alpha), dtype=float).reshape(np.atleast_2d(z).shape[0])

    def _jac(self, z, theta, alpha, wrt):
        theta = np.asarray(theta, float).reshape(-1)
        alpha = np.asarray(alpha, float).reshape(-1)
        x = alpha if wrt == "alpha" else theta
        T = np.atleast_2d(z).shape[0]
        out = np.empty((T, x.size))
        for k in range(x.size):
            h = FD_STEP * (1.0 + abs(x[k]))
            e = np.zeros(x.size)
            e[k] = h
            if wrt == "alpha":
                out[:, k] = (self.value(z, theta, alpha + e) - self.value(z, theta, alpha - e)) / (2 * h)
            else:
                out[:, k] = (self.value(z, theta + e, alpha) - self.value(z, theta - e, alpha)) / (2 * h)
        return out

    def d_alpha(self, z, theta, alpha):
        if self.zeta_alpha is not None:
            return np.asarray(self.zeta_alpha(z, theta, alpha), float).reshape(np.atleast_2d(z).shape[0], -1)
        return self._jac(z, theta, alpha, "alpha")

    def d_theta(self, z, theta, alpha):
        if self.zeta_theta is not None:
            return np.asarray(self.zeta_theta(z, theta, alpha), float).reshape(np.atleast_2d(z).shape[0], -1)
        return self._jac(z, theta, alpha, "theta")

    def d_alphaalpha(self, z, theta, alpha):
        alpha = np.asarray(alpha, float).reshape(-1)
        T, d = np.atleast_2d(z).shape[0], alpha.size
        if self.zeta_alphaalpha is not None:
            return np.asarray(self.zeta_alphaalpha(z, theta, alpha), float).reshape(T, d, d)
        out = np.empty((T, d, d))
        steps = FD_STEP_SECOND * (1.0 + np.abs(alpha))
        for a in range(d):
            for b in range(d):
                ea, eb = np.zeros(d), np.zeros(d)
                ea[a], eb[b] = steps[a], steps[b]
                v = (self.value(z, theta, alpha + ea + eb) - self.value(z, theta, alpha + ea - eb)
                     - self.value(z, theta, alpha - ea + eb) + self.value(z, theta, alpha - ea - eb))
                out[:, a, b] = v / (4 * steps[a] * steps[b])
        return out


def estimate_zeta(fit: FitReport, zeta: ZetaFunctional, correction: CorrectionResult | None = None,
                  ell=None, bias_method: str = "auto") -> FunctionalEstimate:
    """Plug-in average of ``zeta`` with its bias term and HAC-type variance.

    Per individual the bias is
    ``sum_{j=0}^{l} T^{-1} sum_t zeta_a,t' psi_{t-j} + zeta_a' B_alpha + tr(zeta_aa Sigma)/2``
    with ``psi_t = -H g_t``; lags ``j >= 1`` use ``zeta_a,t`` centred at its
    time mean. The variance is
    ``mean(zeta_a' Sigma zeta_a + zeta_th' V_theta zeta_th) + sum_{j=0}^{l} T^{-1} sum_t d_t d_{t-j}``
    with ``d_t = zeta_t - zeta_bar``.
    """
    theta, effects, est = _source(fit, correction, ell, bias_method)
    panel, model = fit.panel, fit.model
    Sig, Ba = est.alpha_terms(theta, effects)
    V_theta = est.theta_avar(theta, effects) if model.dims.d_theta else np.zeros((0, 0))
    ells = trims(panel, ell)

    zs, biases, quad = [], [], []
    for b, e, w, S, B_a, l in zip(panel, effects, fit.weights, Sig, Ba, ells):
        z, a = b.values, e.alpha
        zt = zeta.value(z, theta, a)
        za = zeta.d_alpha(z, theta, a)
        zaa = zeta.d_alphaalpha(z, theta, a)
        _, Ga = sample_jacobians(b, model, theta, a)
        H = projections(Ga, w, b.id).H
        psi = -np.asarray(model.g(z, theta, a), float) @ H.T
        Psi = window_sum(psi, l)
        za_c = za - za.mean(axis=0)
        T = b.T
        t1 = (np.sum(za * psi) + np.sum(za_c * (Psi - psi))) / T
        biases.append(t1 + za.mean(axis=0) @ B_a + 0.5 * np.trace(zaa.mean(axis=0) @ S))
        q = np.mean(np.einsum("ta,ab,tb->t", za, S, za))
        if V_theta.size:
            zth = zeta.d_theta(z, theta, a)
            q += np.mean(np.einsum("ta,ab,tb->t", zth, V_theta, zth))
        quad.append(q)
        zs.append(zt)

    point = float(np.mean([zt.mean() for zt in zs]))
    hac, lag0 = 0.0, 0.0
    for zt, l in zip(zs, ells):
        dv = zt - point
        hac += float(dv @ window_sum(dv, l)) / zt.size
        lag0 += float(dv @ dv) / zt.size
    hac, lag0 = hac / panel.n, lag0 / panel.n
    if hac < 0:
        warnings.warn("truncated long-run variance of zeta is negative; using its lag-0 part",
                      RuntimeWarning, stacklevel=2)
        hac = lag0
    var = float(np.mean(quad)) + hac
    bias = float(np.mean(biases))
    corr = point - bias / panel.T_bar
    se = float(np.sqrt(var / (panel.n * panel.T_bar)))
    return FunctionalEstimate(zeta.name, point, bias, corr, var, se, corr if correction is not None else point)


FUNCTIONALS: dict[str, Callable] = {
    "mean_effect": builtin_mean_effect,
    "sd_effect": builtin_sd_effect,
}


def register(name: str, factory: Callable) -> None:
    """Register a functional factory ``(k) -> MuFunctional | SdEffect | ZetaFunctional``."""
    FUNCTIONALS[name] = factory


def parse_functional(spec: str):
    """``"name"`` or ``"name:k"`` -> functional object."""
    name, _, arg = spec.partition(":")
    try:
        factory = FUNCTIONALS[name]
    except KeyError:
        raise ValueError(f"unknown functional {name!r}; known: {sorted(FUNCTIONALS)}") from None
    return factory(int(arg)) if arg else factory()


def estimate_functional(fit, f, correction=None, ell=None, bias_method="auto") -> FunctionalEstimate:
    if isinstance(f, ZetaFunctional):
        return estimate_zeta(fit, f, correction, ell, bias_method)
    return estimate_mu(fit, f, correction, ell, bias_method)
