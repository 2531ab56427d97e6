"""Moment functions ``g(z; theta, alpha)`` and their derivative suite.

Every model method is vectorised over the rows of ``z`` (shape ``(T, k)``)
and returns arrays with time on axis 0:

=================  =========================
``g``              ``(T, d_g)``
``G_theta``        ``(T, d_g, d_theta)``
``G_alpha``        ``(T, d_g, d_alpha)``
``G_alphaalpha``   ``(T, d_alpha*d_g, d_alpha)``
``G_thetaalpha``   ``(T, d_alpha*d_g, d_theta)``
=================  =========================

The second-derivative arrays stack ``d G_alpha / d alpha_j`` (resp.
``d G_theta / d alpha_j``) row-wise in the order of the components of
``alpha``: rows ``j*d_g:(j+1)*d_g`` hold the block for ``alpha_j``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class ModelDims:
    d_g: int
    d_theta: int
    d_alpha: int

    def __post_init__(self):
        if min(self.d_g, self.d_theta, self.d_alpha) < 0 or self.d_alpha < 1:
            raise ValueError(f"invalid dimensions {self}")
        if self.d_g < self.d_alpha:
            raise ValueError(f"d_g={self.d_g} < d_alpha={self.d_alpha}: inner problem not identified")

    @property
    def order_condition(self) -> bool:
        return self.d_g >= self.d_theta + self.d_alpha


class MomentModel:
    """Base class for moment models.

    Subclasses implement :meth:`g` and the four derivative methods. Set
    ``linear_in_alpha`` when ``g`` is affine in ``alpha`` (the inner problem
    is then solved by weighted least squares) and ``linear_in_theta`` when it
    is affine in ``theta``.
    """

    dims: ModelDims
    arity: int | None = None
    has_analytic_second: bool = True
    linear_in_alpha: bool = False
    linear_in_theta: bool = False
    name: str = "model"

    def g(self, z, theta, alpha):
        raise NotImplementedError

    def G_theta(self, z, theta, alpha):
        raise NotImplementedError

    def G_alpha(self, z, theta, alpha):
        raise NotImplementedError

    def G_alphaalpha(self, z, theta, alpha):
        raise NotImplementedError

    def G_thetaalpha(self, z, theta, alpha):
        raise NotImplementedError

    #: optional ``(fit, ell) -> estimator`` factory for a model-specific bias
    #: estimator; see ``bias.make_estimator``
    bias_estimator = None

    def initial_theta(self, panel) -> np.ndarray:
        """Starting value for the outer solver."""
        return np.zeros(self.dims.d_theta)


class LinearRCIV(MomentModel):
    """Linear random-coefficient IV moments ``w (y - x1'alpha - x2'theta)``.

    ``z`` is laid out as ``(y, x1[0..d_x1), x2[0..d_x2), w2[0..d_w2))`` and
    the instrument vector is ``w = (x1, w2)``. Only the regressors with
    common coefficients (``x2``) may be endogenous.
    """

    has_analytic_second = True
    linear_in_alpha = True
    linear_in_theta = True
    name = "linear_rc_iv"

    def __init__(self, d_x1: int, d_x2: int, d_w2: int):
        self.d_x1, self.d_x2, self.d_w2 = int(d_x1), int(d_x2), int(d_w2)
        self.dims = ModelDims(d_g=self.d_x1 + self.d_w2, d_theta=self.d_x2, d_alpha=self.d_x1)
        self.arity = 1 + self.d_x1 + self.d_x2 + self.d_w2

    def split(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        a, b = 1 + self.d_x1, 1 + self.d_x1 + self.d_x2
        y, x1, x2, w2 = z[:, 0], z[:, 1:a], z[:, a:b], z[:, b:]
        return y, x1, x2, w2

    def instruments(self, z):
        _, x1, _, w2 = self.split(z)
        return np.hstack([x1, w2])

    def residual(self, z, theta, alpha):
        y, x1, x2, _ = self.split(z)
        return y - x1 @ np.asarray(alpha, dtype=float) - x2 @ np.asarray(theta, dtype=float).reshape(-1)

    def g(self, z, theta, alpha):
        return self.instruments(z) * self.residual(z, theta, alpha)[:, None]

    def G_theta(self, z, theta, alpha):
        _, _, x2, _ = self.split(z)
        return -self.instruments(z)[:, :, None] * x2[:, None, :]

    def G_alpha(self, z, theta, alpha):
        _, x1, _, _ = self.split(z)
        return -self.instruments(z)[:, :, None] * x1[:, None, :]

    def G_alphaalpha(self, z, theta, alpha):
        T = np.atleast_2d(z).shape[0]
        d = self.dims
        return np.zeros((T, d.d_alpha * d.d_g, d.d_alpha))

    def G_thetaalpha(self, z, theta, alpha):
        T = np.atleast_2d(z).shape[0]
        d = self.dims
        return np.zeros((T, d.d_alpha * d.d_g, d.d_theta))

    def bias_estimator(self, fit, ell=None):
        """Closed-form bias, valid only for one-step fits with ``S_ww`` weights; ``None`` otherwise."""
        from .linear_rc import LinearRCBias

        if fit.step != "one-step":
            return None
        for b, w in zip(fit.panel, fit.weights):
            W = self.instruments(b.values)
            if not np.allclose(w.W, W.T @ W / b.T, rtol=1e-10, atol=0.0):
                return None
        return LinearRCBias(fit, ell)

    def initial_theta(self, panel) -> np.ndarray:
        """Pooled within-IV estimate, falling back to zeros."""
        from .errors import FEGMMError
        from .linear_rc import pooled_fc_iv

        try:
            theta = pooled_fc_iv(panel, self).theta
        except (FEGMMError, np.linalg.LinAlgError):
            return np.zeros(self.dims.d_theta)
        return theta if np.all(np.isfinite(theta)) else np.zeros(self.dims.d_theta)


class VarianceComponents(MomentModel):
    """``g = y - alpha``: the individual mean, no common parameter."""

    has_analytic_second = True
    linear_in_alpha = True
    linear_in_theta = True
    name = "variance_components"
    arity = 1

    def __init__(self):
        self.dims = ModelDims(d_g=1, d_theta=0, d_alpha=1)

    def g(self, z, theta, alpha):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return z[:, :1] - np.asarray(alpha, dtype=float).reshape(1, 1)

    def G_theta(self, z, theta, alpha):
        return np.zeros((np.atleast_2d(z).shape[0], 1, 0))

    def G_alpha(self, z, theta, alpha):
        return -np.ones((np.atleast_2d(z).shape[0], 1, 1))

    def G_alphaalpha(self, z, theta, alpha):
        return np.zeros((np.atleast_2d(z).shape[0], 1, 1))

    def G_thetaalpha(self, z, theta, alpha):
        return np.zeros((np.atleast_2d(z).shape[0], 1, 0))

    def bias_estimator(self, fit, ell=None):
        return VarianceComponentsBias(fit)


class VarianceComponentsBias:
    """Closed-form bias pieces for :class:`VarianceComponents`.

    The model is just identified with constant ``G_alpha``, so every bias
    piece of the effects vanishes and ``Sigma_alpha_i`` is the within
    variance ``T_i^{-1} sum_t (y_it - alpha_i)^2``.
    """

    name = "model"

    def __init__(self, fit):
        self.fit = fit

    def bias(self, theta, effects=None):
        return np.zeros(0)

    def score_bias(self, theta, effects=None):
        return np.zeros(0)

    def alpha_terms(self, theta, effects):
        sig = [np.array([[np.mean((b.values[:, 0] - e.alpha[0]) ** 2)]])
               for b, e in zip(self.fit.panel, effects)]
        return sig, [np.zeros(1) for _ in sig]

    def theta_avar(self, theta, effects=None):
        return np.zeros((0, 0))

    def se(self, theta, effects=None):
        return np.zeros(0)


def linear_rc_iv(d_x1: int, d_x2: int, d_w2: int) -> LinearRCIV:
    return LinearRCIV(d_x1, d_x2, d_w2)


def variance_components() -> VarianceComponents:
    return VarianceComponents()


# -- finite differences ------------------------------------------------------

FD_STEP = 1e-6
FD_STEP_SECOND = 1e-4


def _steps(x, scale):
    return scale * (1.0 + np.abs(x))


class FiniteDifferenceModel(MomentModel):
    """Wraps a bare ``g`` with central-difference derivatives.

    First derivatives use ``h = 1e-6 (1 + |x|)``; second derivatives use the
    four-point cross difference of ``g`` with ``h = 1e-4 (1 + |x|)``.
    """

    has_analytic_second = False

    def __init__(self, g, dims: ModelDims, arity: int | None = None, name: str = "fd_model",
                 linear_in_alpha: bool = False, linear_in_theta: bool = False):
        self._g = g
        self.dims = dims
        self.arity = arity
        self.name = name
        self.linear_in_alpha = linear_in_alpha
        self.linear_in_theta = linear_in_theta

    def g(self, z, theta, alpha):
        out = np.asarray(self._g(np.atleast_2d(z), np.asarray(theta, float), np.asarray(alpha, float)),
                         dtype=np.float64)
        return out.reshape(np.atleast_2d(z).shape[0], self.dims.d_g)

    def _jac(self, z, theta, alpha, wrt):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        x = alpha if wrt == "alpha" else theta
        T = np.atleast_2d(z).shape[0]
        out = np.empty((T, self.dims.d_g, x.size))
        for k, h in enumerate(_steps(x, FD_STEP)):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            if wrt == "alpha":
                gp, gm = self.g(z, theta, xp), self.g(z, theta, xm)
            else:
                gp, gm = self.g(z, xp, alpha), self.g(z, xm, alpha)
            out[:, :, k] = (gp - gm) / (2 * h)
        if not np.all(np.isfinite(out)):
            warnings.warn("non-finite finite-difference derivative", RuntimeWarning, stacklevel=3)
        return out

    def G_theta(self, z, theta, alpha):
        return self._jac(z, theta, alpha, "theta")

    def G_alpha(self, z, theta, alpha):
        return self._jac(z, theta, alpha, "alpha")

    def _cross(self, z, theta, alpha, first):
        # d^2 g / d alpha_j d v_k, v = alpha or theta, stacked by j
        theta = np.asarray(theta, dtype=float).reshape(-1)
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        d = self.dims
        v = alpha if first == "alpha" else theta
        T = np.atleast_2d(z).shape[0]
        out = np.empty((T, d.d_alpha * d.d_g, v.size))
        ha = _steps(alpha, FD_STEP_SECOND)
        hv = _steps(v, FD_STEP_SECOND)

        def ev(da, dv):
            a = alpha + da
            if first == "alpha":
                return self.g(z, theta, a + dv)
            return self.g(z, theta + dv, a)

        for j in range(d.d_alpha):
            ej = np.zeros(d.d_alpha)
            ej[j] = ha[j]
            for k in range(v.size):
                ek = np.zeros(v.size)
                ek[k] = hv[k]
                val = (ev(ej, ek) - ev(ej, -ek) - ev(-ej, ek) + ev(-ej, -ek)) / (4 * ha[j] * hv[k])
                out[:, j * d.d_g:(j + 1) * d.d_g, k] = val
        return out

    def G_alphaalpha(self, z, theta, alpha):
        return self._cross(z, theta, alpha, "alpha")

    def G_thetaalpha(self, z, theta, alpha):
        return self._cross(z, theta, alpha, "theta")


def finite_difference_suite(model_or_g, dims: ModelDims | None = None, **kwargs) -> FiniteDifferenceModel:
    """Wrap a model (only its ``g`` is used) or a bare callable with numeric derivatives."""
    if isinstance(model_or_g, MomentModel):
        m = model_or_g
        return FiniteDifferenceModel(m.g, m.dims, m.arity, f"fd({m.name})",
                                     m.linear_in_alpha, m.linear_in_theta)
    if dims is None:
        raise ValueError("dims are required when wrapping a bare function")
    return FiniteDifferenceModel(model_or_g, dims, **kwargs)


# -- block-level evaluation -------------------------------------------------

def _checked(values, block, what):
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values.reshape(values.shape[0], -1)))[0, 0]
        raise NumericError(f"non-finite {what} for individual {block.id} at t={block.times[bad]}",
                           ids=[block.id])
    return values


def sample_moment(block, model: MomentModel, theta, alpha) -> np.ndarray:
    """``T_i^{-1} sum_t g(z_it; theta, alpha)``."""
    return _checked(model.g(block.values, theta, alpha), block, "moment").mean(axis=0)


def sample_jacobians(block, model: MomentModel, theta, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Time averages of ``G_theta`` and ``G_alpha``."""
    Gt = _checked(model.G_theta(block.values, theta, alpha), block, "G_theta").mean(axis=0)
    Ga = _checked(model.G_alpha(block.values, theta, alpha), block, "G_alpha").mean(axis=0)
    return Gt, Ga


def check_derivatives(model: MomentModel, z, theta, alpha) -> dict[str, float]:
    """Relative discrepancy between ``model``'s derivatives and finite differences.

    First derivatives are compared with central differences of ``g``; second
    derivatives with central differences of the model's own first
    derivatives.
    """
    fd = finite_difference_suite(model)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)

    def rel(a, b):
        a, b = np.asarray(a), np.asarray(b)
        if a.size == 0:
            return 0.0
        return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))

    out = {
        "G_theta": rel(model.G_theta(z, theta, alpha), fd.G_theta(z, theta, alpha)),
        "G_alpha": rel(model.G_alpha(z, theta, alpha), fd.G_alpha(z, theta, alpha)),
    }
    # second derivatives: differentiate the analytic first derivatives
    d = model.dims
    T = np.atleast_2d(z).shape[0]
    Gaa = np.empty((T, d.d_alpha * d.d_g, d.d_alpha))
    Gta = np.empty((T, d.d_alpha * d.d_g, d.d_theta))
    for j, h in enumerate(_steps(alpha, FD_STEP)):
        ap, am = alpha.copy(), alpha.copy()
        ap[j] += h
        am[j] -= h
        Gaa[:, j * d.d_g:(j + 1) * d.d_g, :] = (model.G_alpha(z, theta, ap) - model.G_alpha(z, theta, am)) / (2 * h)
        Gta[:, j * d.d_g:(j + 1) * d.d_g, :] = (model.G_theta(z, theta, ap) - model.G_theta(z, theta, am)) / (2 * h)
    out["G_alphaalpha"] = rel(model.G_alphaalpha(z, theta, alpha), Gaa)
    out["G_thetaalpha"] = rel(model.G_thetaalpha(z, theta, alpha), Gta)
    return out
