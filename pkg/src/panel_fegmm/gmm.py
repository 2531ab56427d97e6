"""Per-individual inner solves, the profile score and the outer estimators of ``theta``.

The inner problem for individual ``i`` at fixed ``theta`` is

    alpha_i(theta) = argmin_a  g_i(theta, a)' W_i^{-1} g_i(theta, a),

with ``g_i`` the time average of the moments, and the multiplier is
``lambda_i = -W_i^{-1} g_i(theta, alpha_i)``. The profile score
``s(theta) = -n^{-1} sum_i G_theta_i' lambda_i`` is the gradient of half the
concentrated objective averaged over individuals.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize as sopt

from .errors import ConvergenceError, FEGMMError, NumericError, WeakIdentificationError
from .moments import MomentModel, sample_jacobians, sample_moment
from .panel import PanelDataset, validate
from .weighting import WeightMatrix, optimal_weight

TOL_INNER = 1e-10
TOL_OUTER = 1e-8
MAX_ITER = 200
WEAK_COND = 1e12


@dataclass(frozen=True)
class InnerSolution:
    id: str
    alpha: np.ndarray
    lam: np.ndarray
    objective: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class Projections:
    """``Sigma = (G'W^{-1}G)^{-1}``, ``H = Sigma G'W^{-1}``, ``P = W^{-1} - W^{-1} G H``."""

    Sigma: np.ndarray
    H: np.ndarray
    P: np.ndarray


def projections(G_alpha: np.ndarray, W: WeightMatrix, id_: str = "") -> Projections:
    WiG = W.solve(G_alpha)
    A = G_alpha.T @ WiG
    A = 0.5 * (A + A.T)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > WEAK_COND:
        raise WeakIdentificationError(
            f"G_alpha' W^-1 G_alpha is singular for individual {id_}: weak identification", ids=[id_])
    Sigma = np.linalg.inv(A)
    Sigma = 0.5 * (Sigma + Sigma.T)
    H = Sigma @ WiG.T
    P = W.inverse - WiG @ H
    return Projections(Sigma, H, 0.5 * (P + P.T))


def _objective(block, model, theta, alpha, W):
    g = sample_moment(block, model, theta, alpha)
    return float(g @ W.solve(g)), g


def solve_individual(block, model: MomentModel, theta, W: WeightMatrix, init=None,
                     tol: float = TOL_INNER, max_iter: int = MAX_ITER) -> InnerSolution:
    """Minimise the individual quadratic form in ``alpha`` at fixed ``theta``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    d_a = model.dims.d_alpha
    alpha = np.zeros(d_a) if init is None else np.array(init, dtype=np.float64).reshape(d_a)

    if model.linear_in_alpha:
        g0 = sample_moment(block, model, theta, alpha)
        _, Ga = sample_jacobians(block, model, theta, alpha)
        proj = projections(Ga, W, block.id)
        alpha = alpha - proj.H @ g0
        obj, g = _objective(block, model, theta, alpha, W)
        return InnerSolution(block.id, alpha, -W.solve(g), obj, True, 1)

    it = 0
    obj, g = _objective(block, model, theta, alpha, W)
    for it in range(1, max_iter + 1):
        _, Ga = sample_jacobians(block, model, theta, alpha)
        Wig = W.solve(g)
        grad = Ga.T @ Wig
        if np.max(np.abs(grad)) < tol * (1.0 + abs(obj)):
            return InnerSolution(block.id, alpha, -Wig, obj, True, it - 1)
        Gaa = model.G_alphaalpha(block.values, theta, alpha).mean(axis=0)
        d_g = model.dims.d_g
        gn = Ga.T @ W.solve(Ga)
        second = np.column_stack([Gaa[k * d_g:(k + 1) * d_g].T @ Wig for k in range(d_a)])
        hess = gn + second
        if np.linalg.cond(gn) > WEAK_COND:
            raise WeakIdentificationError(
                f"G_alpha' W^-1 G_alpha is singular for individual {block.id}: weak identification",
                ids=[block.id])
        try:
            step = -np.linalg.solve(hess, grad)
            if step @ grad >= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = -np.linalg.solve(gn, grad)
        t = 1.0
        while t > 1e-12:
            try:
                new_obj, new_g = _objective(block, model, theta, alpha + t * step, W)
            except NumericError:
                new_obj = np.inf
            # slack of a few ulps so a converging step is not rejected on rounding
            if new_obj <= obj + 1e-4 * t * (step @ grad) * 2 + 8 * np.finfo(float).eps * (1.0 + abs(obj)):
                break
            t *= 0.5
        else:
            return _trust_region(block, model, theta, W, alpha, tol, max_iter, it)
        alpha = alpha + t * step
        obj, g = new_obj, new_g
    raise ConvergenceError(f"inner solve for individual {block.id} did not converge", ids=[block.id],
                           last=alpha)


def _trust_region(block, model, theta, W, alpha0, tol, max_iter, it0):
    d_g = model.dims.d_g
    d_a = model.dims.d_alpha

    def f(a):
        return _objective(block, model, theta, a, W)[0]

    def jac(a):
        g = sample_moment(block, model, theta, a)
        _, Ga = sample_jacobians(block, model, theta, a)
        return 2 * Ga.T @ W.solve(g)

    def hess(a):
        g = sample_moment(block, model, theta, a)
        _, Ga = sample_jacobians(block, model, theta, a)
        Wig = W.solve(g)
        Gaa = model.G_alphaalpha(block.values, theta, a).mean(axis=0)
        second = np.column_stack([Gaa[k * d_g:(k + 1) * d_g].T @ Wig for k in range(d_a)])
        return 2 * (Ga.T @ W.solve(Ga) + second)

    res = sopt.minimize(f, alpha0, jac=jac, hess=hess, method="trust-exact",
                        options={"gtol": tol, "maxiter": max_iter})
    alpha = res.x
    obj, g = _objective(block, model, theta, alpha, W)
    _, Ga = sample_jacobians(block, model, theta, alpha)
    Wig = W.solve(g)
    if np.max(np.abs(Ga.T @ Wig)) >= tol * (1.0 + abs(obj)) * 10:
        raise ConvergenceError(f"inner solve for individual {block.id} did not converge",
                               ids=[block.id], last=alpha)
    return InnerSolution(block.id, alpha, -Wig, obj, True, it0 + int(res.nit))


def map_ordered(fn, items, workers: int = 1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def normalize_weights(panel: PanelDataset, model: MomentModel, weights) -> tuple[WeightMatrix, ...]:
    """Expand ``None`` / a single weight / a per-id mapping / a sequence to one weight per individual."""
    d_g = model.dims.d_g
    if weights is None:
        return tuple(WeightMatrix.identity(d_g) for _ in panel)
    if isinstance(weights, WeightMatrix):
        out = tuple(weights for _ in panel)
    elif isinstance(weights, dict):
        out = tuple(weights[b.id] for b in panel)
    elif isinstance(weights, np.ndarray) and weights.ndim == 2:
        w = WeightMatrix(weights)
        out = tuple(w for _ in panel)
    else:
        out = tuple(w if isinstance(w, WeightMatrix) else WeightMatrix(w) for w in weights)
    if len(out) != panel.n:
        raise ValueError(f"{len(out)} weights for {panel.n} individuals")
    for w in out:
        if w.W.shape != (d_g, d_g):
            raise ValueError(f"weight shape {w.W.shape} does not match d_g={d_g}")
    return out


def solve_all(panel, model, theta, weights, inits=None, workers: int = 1) -> tuple[InnerSolution, ...]:
    inits = inits if inits is not None else [None] * panel.n

    def one(k):
        return solve_individual(panel[k], model, theta, weights[k], inits[k])

    return tuple(map_ordered(one, range(panel.n), workers))


def profile_score(panel, model, theta, weights, effects=None, workers: int = 1) -> np.ndarray:
    """``-n^{-1} sum_i G_theta_i' lambda_i`` with ``alpha_i`` re-solved at ``theta``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    weights = normalize_weights(panel, model, weights)
    if effects is None:
        effects = solve_all(panel, model, theta, weights, workers=workers)
    return _score(panel, model, theta, effects)


def _score(panel, model, theta, effects):
    s = np.zeros(model.dims.d_theta)
    for b, e in zip(panel, effects):
        Gt, _ = sample_jacobians(b, model, theta, e.alpha)
        s -= Gt.T @ e.lam
    return s / panel.n


def jacobian(panel, model, theta, effects, weights) -> np.ndarray:
    """``n^{-1} sum_i G_theta_i' P_i G_theta_i`` with ``P_i`` built from the given weights."""
    d_t = model.dims.d_theta
    J = np.zeros((d_t, d_t))
    for b, e, w in zip(panel, effects, weights):
        Gt, Ga = sample_jacobians(b, model, theta, e.alpha)
        P = projections(Ga, w, b.id).P
        J += Gt.T @ P @ Gt
    J /= panel.n
    return 0.5 * (J + J.T)


@dataclass(frozen=True)
class FitReport:
    theta: np.ndarray
    effects: tuple[InnerSolution, ...]
    step: str
    weights: tuple[WeightMatrix, ...]
    score: np.ndarray
    score_norm: float
    J: np.ndarray
    se: np.ndarray
    iterations: int
    trajectory: tuple = ()
    stage1: FitReport | None = None
    model: MomentModel | None = field(default=None, repr=False, compare=False)
    panel: PanelDataset | None = field(default=None, repr=False, compare=False)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([e.alpha for e in self.effects])

    @property
    def lams(self) -> np.ndarray:
        return np.array([e.lam for e in self.effects])

    @property
    def optimal(self) -> bool:
        return all(w.kind == "optimal" for w in self.weights)


def solve_common(panel: PanelDataset, model: MomentModel, weights=None, theta_init=None,
                 tol: float = TOL_OUTER, max_iter: int = MAX_ITER, workers: int = 1,
                 alpha_init=None, step: str = "one-step") -> FitReport:
    """Quasi-Newton root of the profile score, using ``J`` as its Jacobian."""
    validate(panel, model)
    d = model.dims
    if not d.order_condition:
        raise WeakIdentificationError(
            f"order condition fails: d_g={d.d_g} < d_theta + d_alpha = {d.d_theta + d.d_alpha}")
    weights = normalize_weights(panel, model, weights)
    if theta_init is None:
        theta_init = model.initial_theta(panel)
    theta = np.asarray(theta_init, dtype=np.float64).reshape(d.d_theta).copy()
    inits = None if alpha_init is None else [np.asarray(a) for a in alpha_init]
    effects = solve_all(panel, model, theta, weights, inits, workers)
    trajectory = [theta.copy()]

    if d.d_theta == 0:
        report = FitReport(theta, effects, step, weights, np.zeros(0), 0.0, np.zeros((0, 0)),
                           np.zeros(0), 0, tuple(trajectory), model=model, panel=panel)
        return replace(report, se=np.zeros(0))

    def mean_obj(eff):
        return float(np.mean([e.objective for e in eff]))

    s = _score(panel, model, theta, effects)
    it = 0
    while True:
        snorm = float(np.max(np.abs(s)))
        if snorm < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"outer solve did not converge in {max_iter} iterations "
                                   f"(score norm {snorm:.3e})", last=theta, trajectory=trajectory)
        it += 1
        J = jacobian(panel, model, theta, effects, weights)
        try:
            delta = -np.linalg.solve(J, s)
        except np.linalg.LinAlgError:
            raise NumericError("score Jacobian is singular") from None
        obj0 = mean_obj(effects)
        t = 1.0
        while True:
            cand = theta + t * delta
            try:
                eff_c = solve_all(panel, model, cand, weights, [e.alpha for e in effects], workers)
                ok = (model.linear_in_theta and model.linear_in_alpha) or \
                    mean_obj(eff_c) <= obj0 + 1e-12 * (1 + abs(obj0))
            except (ConvergenceError, NumericError):
                ok = False
            if ok or t < 1e-8:
                break
            t *= 0.5
        theta, effects = cand, eff_c
        trajectory.append(theta.copy())
        s = _score(panel, model, theta, effects)
        # a full step that no longer moves theta means the score is at rounding level
        if float(np.max(np.abs(t * delta))) <= 1e-13 * (1.0 + float(np.max(np.abs(theta)))):
            break

    J = jacobian(panel, model, theta, effects, weights)
    report = FitReport(theta, effects, step, weights, s, float(np.max(np.abs(s))), J,
                       np.zeros(d.d_theta), it, tuple(trajectory), model=model, panel=panel)
    return replace(report, se=theta_standard_errors(report))


def _relabel(exc: FEGMMError, stage: str) -> FEGMMError:
    exc.args = (f"{stage}: {exc.args[0]}",) + exc.args[1:]
    return exc


def two_step(panel: PanelDataset, model: MomentModel, W_first=None, theta_init=None,
             tol: float = TOL_OUTER, max_iter: int = MAX_ITER, workers: int = 1) -> FitReport:
    """Stage 1 with ``W_first``; stage 2 with lag-0 moment covariances at the stage-1 estimates."""
    try:
        first = solve_common(panel, model, W_first, theta_init, tol, max_iter, workers)
    except FEGMMError as exc:
        raise _relabel(exc, "stage 1") from None
    try:
        omegas = tuple(optimal_weight(b, model, first.theta, e.alpha) for b, e in zip(panel, first.effects))
        second = solve_common(panel, model, omegas, first.theta, tol, max_iter, workers,
                              alpha_init=first.alphas, step="two-step")
    except FEGMMError as exc:
        raise _relabel(exc, "stage 2") from None
    return replace(second, stage1=first)


def moment_covariances(panel, model, theta, effects) -> list[np.ndarray]:
    from .weighting import autocovariance, regularize

    return [regularize(autocovariance(b, model, theta, e.alpha, 0), f" for individual {b.id}")
            for b, e in zip(panel, effects)]


def theta_avar(report: FitReport) -> np.ndarray:
    """Asymptotic variance of ``sqrt(n T_bar) (theta_hat - theta)``.

    With optimal weights this is ``J^{-1}``. Otherwise it is the sandwich
    ``J^{-1} V J^{-1}`` with ``V = n^{-1} sum_i G_theta' P Omega P G_theta``
    and ``Omega`` the lag-0 moment covariance at the estimates.
    """
    panel, model = report.panel, report.model
    d_t = model.dims.d_theta
    if d_t == 0:
        return np.zeros((0, 0))
    try:
        Jinv = np.linalg.inv(report.J)
    except np.linalg.LinAlgError:
        raise NumericError("J_s is singular; standard errors unavailable") from None
    if report.optimal:
        return Jinv
    V = np.zeros((d_t, d_t))
    omegas = moment_covariances(panel, model, report.theta, report.effects)
    for b, e, w, om in zip(panel, report.effects, report.weights, omegas):
        Gt, Ga = sample_jacobians(b, model, report.theta, e.alpha)
        PG = projections(Ga, w, b.id).P @ Gt
        V += PG.T @ om @ PG
    V /= panel.n
    return Jinv @ V @ Jinv


def theta_standard_errors(report: FitReport) -> np.ndarray:
    """``sqrt(diag(avar) / (n T_bar))`` with ``avar`` from :func:`theta_avar`."""
    if report.model.dims.d_theta == 0:
        return np.zeros(0)
    avar = theta_avar(report)
    return np.sqrt(np.clip(np.diag(avar), 0, None) / (report.panel.n * report.panel.T_bar))


def fit(panel, model, steps: int = 2, W_first=None, theta_init=None, workers: int = 1) -> FitReport:
    if steps == 2:
        return two_step(panel, model, W_first, theta_init, workers=workers)
    if steps == 1:
        return solve_common(panel, model, W_first, theta_init, workers=workers)
    raise ValueError(f"steps must be 1 or 2, got {steps}")


__all__ = [
    "InnerSolution", "Projections", "projections", "solve_individual", "profile_score", "jacobian",
    "FitReport", "solve_common", "two_step", "theta_avar", "theta_standard_errors", "fit", "normalize_weights",
    "map_ordered",
]
