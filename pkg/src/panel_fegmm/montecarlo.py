"""Rational-addiction simulation design and the Monte Carlo harness.

Consumption follows

    C_it = a0_i + a1_i P_it + theta1 C_{i,t-1} + theta2 C_{i,t+1} + psi e_it,
    P_it = h0_i + h1_i Tax_it + u_it,

and is generated from the stationary solution of the second-order
difference equation,

    C_t = sum_{s>=1} phi1^s h(t+s) / (theta1 phi1 (phi2-phi1))
        + sum_{s>=0} phi2^{-s} h(t-s) / (theta1 phi2 (phi2-phi1)),

with ``h(t) = a0 + a1 P_{t-1} + psi e_{t-1}``; both sums are truncated
once the geometric weights fall below ``tol``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import FEGMMError
from .functionals import builtin_mean_effect, mu_core, variance_functional
from .kernels import geometric_filter
from .linear_rc import (LinearRCData, closed_form_alpha, closed_form_bc, closed_form_ibc,
                        closed_form_theta, homoskedastic_sigma_alpha, homoskedastic_theta_se,
                        pooled_fc_iv, pooled_fc_ols)
from .moments import linear_rc_iv
from .panel import IndividualBlock, PanelDataset

COLUMNS = ("C", "const", "P", "C_lag", "C_lead", "P_lag", "P_lead", "Tax", "Tax_lag", "Tax_lead")
ESTIMATORS = ("OLS-FC", "IV-FC", "OLS-RC", "BC-OLS", "IBC-OLS", "IV-RC", "BC-IV", "IBC-IV")
PARAMETERS = ("theta2", "mu1", "sigma1")
Z_CRIT = float(norm.ppf(0.975))


@dataclass(frozen=True)
class TaxSource:
    """Where the tax paths come from.

    ``"jump"`` (default): a stationary AR(1) with persistence ``rho`` and
    marginal sd ``sd``, plus upward steps that occur with probability
    ``rate`` per period and have half-normal size with scale ``jump``. This
    mimics tax series that change by discrete legislated steps and erode
    slowly in real terms. ``"ar1"``: the AR(1) part alone. ``"file"``: a
    headerless CSV with one row of tax values per individual covering the
    padded horizon.
    """

    kind: str = "jump"
    rho: float = 0.95
    sd: float = 0.05
    mean: float = 0.0
    rate: float = 0.02
    jump: float = 0.2
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("ar1", "jump", "file"):
            raise ValueError(f"unknown tax source {self.kind!r}")
        if self.kind != "file" and not (abs(self.rho) < 1 and self.sd >= 0):
            raise ValueError("tax AR(1) part needs |rho| < 1 and sd >= 0")
        if self.kind == "jump" and not (0 <= self.rate <= 1 and self.jump >= 0):
            raise ValueError("tax jumps need rate in [0, 1] and jump >= 0")
        if self.kind == "file" and not self.path:
            raise ValueError("file tax source needs a path")


@dataclass(frozen=True)
class RationalAddictionDesign:
    n: int = 51
    T: int = 23
    mu0: float = 72.86
    mu1: float = -31.26
    mu_eta0: float = 0.81
    mu_eta1: float = 0.13
    sigma0: float = 18.54
    sigma1: float = 10.60
    sigma_eta0: float = 0.14
    sigma_eta1: float = 2.05
    rho0: float = -0.17
    rho1: float = 0.0
    sigma_u: float = 0.15
    theta1: float = 0.45
    theta2: float = 0.27
    psi: float = 2.0
    tax: TaxSource = field(default_factory=TaxSource)
    tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tax, dict):
            object.__setattr__(self, "tax", TaxSource(**self.tax))
        if 1 - 4 * self.theta1 * self.theta2 <= 0:
            raise ValueError("design needs 1 - 4 theta1 theta2 > 0 (real roots)")
        if self.theta1 <= 0 or self.theta2 < 0:
            raise ValueError("design needs theta1 > 0 and theta2 >= 0")
        if min(self.sigma0, self.sigma1, self.sigma_eta0, self.sigma_eta1, self.sigma_u) <= 0:
            raise ValueError("standard deviations must be positive")
        if not (abs(self.rho0) < 1 and abs(self.rho1) < 1):
            raise ValueError("correlations must lie in (-1, 1)")
        if self.n < 1 or self.T < 4:
            raise ValueError("design needs n >= 1 and T >= 4")

    @property
    def horizon(self) -> int:
        """Number of terms kept in each geometric sum."""
        p1, p2 = roots(self)
        r = max(p1, 1.0 / p2)
        if r <= 0:
            return 1
        return max(1, math.ceil(math.log(self.tol) / math.log(r)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RationalAddictionDesign:
        d = dict(d)
        if "tax" in d and isinstance(d["tax"], dict):
            d["tax"] = TaxSource(**d["tax"])
        return cls(**d)


def roots(design) -> tuple[float, float]:
    """``(phi1, phi2)`` with ``phi1 < 1 < phi2`` for the calibrated ``(theta1, theta2)``."""
    t1, t2 = design.theta1, design.theta2
    disc = math.sqrt(1 - 4 * t1 * t2)
    return (1 - disc) / (2 * t1), (1 + disc) / (2 * t1)


def _bivariate(rng, n, m1, m2, s1, s2, rho):
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    return m1 + s1 * z1, m2 + s2 * (rho * z1 + math.sqrt(1 - rho * rho) * z2)


def _load_tax(src: TaxSource, n: int, L: int) -> np.ndarray:
    rows = [[float(v) for v in r] for r in csv.reader(Path(src.path).open()) if r]
    if len(rows) < n or min(len(r) for r in rows[:n]) < L:
        raise ValueError(f"tax file {src.path} needs {n} rows of at least {L} periods "
                         f"(sample plus padding)")
    return np.array([r[:L] for r in rows[:n]])


def _tax_paths(rng, src: TaxSource, n: int, L: int) -> np.ndarray:
    if src.kind == "file":
        return _load_tax(src, n, L)
    base = _ar1(rng, src, n, L)
    if src.kind == "jump":
        jumps = (rng.random((n, L)) < src.rate) * np.abs(rng.normal(0.0, src.jump, (n, L)))
        base = base + np.cumsum(jumps, axis=1)
    return base


def _ar1(rng, src, n, L):
    innov_sd = src.sd * math.sqrt(1 - src.rho ** 2)
    x = np.empty((n, L))
    x[:, 0] = src.sd * rng.standard_normal(n)
    eps = innov_sd * rng.standard_normal((n, L))
    for t in range(1, L):
        x[:, t] = src.rho * x[:, t - 1] + eps[:, t]
    return x + src.mean


@dataclass(frozen=True)
class SimulatedPanel:
    panel: PanelDataset
    truth: dict
    alpha: np.ndarray  # realised (a0_i, a1_i)
    C_full: np.ndarray  # C_t for t = 1..T
    raw: dict = field(repr=False, default_factory=dict)


def generate_panel(design: RationalAddictionDesign, rng=None) -> SimulatedPanel:
    """Simulate one balanced panel; rows are the periods ``t = 2..T-1``."""
    rng = np.random.default_rng(design.seed) if rng is None else rng
    n, T, S = design.n, design.T, design.horizon
    p1, p2 = roots(design)
    a0, h0 = _bivariate(rng, n, design.mu0, design.mu_eta0, design.sigma0, design.sigma_eta0, design.rho0)
    a1, h1 = _bivariate(rng, n, design.mu1, design.mu_eta1, design.sigma1, design.sigma_eta1, design.rho1)

    # periods tau = -S-1 .. T+S+1 at positions 0 .. L-1
    L = T + 2 * S + 3
    off = S + 1
    tax = _tax_paths(rng, design.tax, n, L)
    u = design.sigma_u * rng.standard_normal((n, L))
    e = rng.standard_normal((n, L))
    P = h0[:, None] + h1[:, None] * tax + u

    # h(tau) = a0 + a1 P_{tau-1} + psi e_{tau-1} for tau = -S .. T+S+1
    h = a0[:, None] + a1[:, None] * P[:, :-1] + design.psi * e[:, :-1]
    # position q in h <-> tau = q - S
    fwd = geometric_filter(h, p1, S, 1, True)  # out k <-> tau = k - S
    bwd = geometric_filter(h, 1.0 / p2, S + 1, 0, False)  # out k <-> tau = k
    t = np.arange(1, T + 1)
    C = fwd[:, t + S] / (design.theta1 * p1 * (p2 - p1)) + bwd[:, t] / (design.theta1 * p2 * (p2 - p1))

    def at(x, tt):
        return x[:, tt + off]

    rows = np.arange(2, T)  # usable periods
    ci = rows - 1  # index into C (t = 1..T)
    cols = [C[:, ci], np.ones((n, rows.size)), at(P, rows), C[:, ci - 1], C[:, ci + 1],
            at(P, rows - 1), at(P, rows + 1), at(tax, rows), at(tax, rows - 1), at(tax, rows + 1)]
    vals = np.stack(cols, axis=-1)
    blocks = tuple(IndividualBlock(str(i + 1), rows, vals[i]) for i in range(n))
    panel = PanelDataset(blocks, COLUMNS)
    truth = {"theta1": design.theta1, "theta2": design.theta2, "mu1": design.mu1, "sigma1": design.sigma1,
             "phi1": p1, "phi2": p2, "horizon": S, "T_usable": int(rows.size)}
    raw = {"P": P, "e": e, "tax": tax, "offset": off}
    return SimulatedPanel(panel, truth, np.column_stack([a0, a1]), C, raw)


def structural_residual(sim: SimulatedPanel, design: RationalAddictionDesign) -> np.ndarray:
    """``C_t - a0 - a1 P_t - theta1 C_{t-1} - theta2 C_{t+1} - psi e_t`` on ``t = 2..T-1``."""
    C, off = sim.C_full, sim.raw["offset"]
    t = np.arange(2, design.T)
    P = sim.raw["P"][:, t + off]
    e = sim.raw["e"][:, t + off]
    a0, a1 = sim.alpha[:, :1], sim.alpha[:, 1:]
    return C[:, t - 1] - a0 - a1 * P - design.theta1 * C[:, t - 2] - design.theta2 * C[:, t] - design.psi * e


# -- estimators ---------------------------------------------------------------

IV_COLUMNS = ("C", "const", "P", "C_lag", "C_lead", "P_lag", "P_lead", "Tax", "Tax_lag", "Tax_lead")
OLS_COLUMNS = ("C", "const", "P", "C_lag", "C_lead", "C_lag", "C_lead")


def select_columns(panel: PanelDataset, names) -> PanelDataset:
    idx = [panel.columns.index(c) for c in names]
    return PanelDataset(tuple(IndividualBlock(b.id, b.times, b.values[:, idx]) for b in panel), tuple(names))


def iv_model():
    return linear_rc_iv(2, 2, 5)


def ols_model():
    return linear_rc_iv(2, 2, 2)


def _rc_family(panel, model, ell, prefix_nbc, prefix):
    """NBC / BC / IBC estimates of (theta2, mu1, sigma1) with SEs from the closed forms."""
    names = (prefix_nbc, f"BC-{prefix}", f"IBC-{prefix}")
    try:
        data = LinearRCData.from_panel(panel, model)
        theta_hat = closed_form_theta(data)
    except (FEGMMError, np.linalg.LinAlgError) as exc:
        return dict.fromkeys(names, exc)
    out = {}
    for name, theta, corrected in ((prefix_nbc, theta_hat, False),
                                   (f"BC-{prefix}", None, True),
                                   (f"IBC-{prefix}", None, True)):
        try:
            if theta is None:
                theta = closed_form_bc(data, ell) if name.startswith("BC") else closed_form_ibc(data, ell)
            alphas = np.array([closed_form_alpha(ind, theta) for ind in data.individuals])
            Sig = homoskedastic_sigma_alpha(data, theta)
            B = np.zeros_like(alphas)
            se_t = homoskedastic_theta_se(data, theta)
            Tb = data.T_bar
            T_i = np.array([ind.T for ind in data.individuals])
            mean_f = builtin_mean_effect(1)
            _, _, mu_c, mu_v = mu_core(alphas, Sig, B, T_i, Tb, mean_f, corrected)
            mu_p = float(alphas[:, 1].mean())
            s2_p, _, s2_c, s2_v = mu_core(alphas, Sig, B, T_i, Tb, variance_functional(1, mu_p), corrected)
            s2 = s2_c if corrected else s2_p
            sig = math.sqrt(max(s2, 0.0))
            se_sig = math.sqrt(s2_v / data.n) / (2 * sig) if sig > 0 else math.inf
            mu = mu_c if corrected else mu_p
            out[name] = {"theta2": (float(theta[1]), float(se_t[1])),
                         "mu1": (mu, math.sqrt(mu_v / data.n)),
                         "sigma1": (sig, se_sig)}
        except (FEGMMError, np.linalg.LinAlgError) as exc:
            out[name] = exc
    return out


def estimate_all(panel: PanelDataset, ell=None, estimators=ESTIMATORS) -> dict:
    """Estimates and SEs per estimator: ``{name: {param: (estimate, se)}}`` or an exception."""
    out = {}
    iv_panel = select_columns(panel, IV_COLUMNS)
    ivm = iv_model()
    if "OLS-FC" in estimators or "IV-FC" in estimators:
        for name, fn in (("OLS-FC", pooled_fc_ols), ("IV-FC", pooled_fc_iv)):
            if name not in estimators:
                continue
            try:
                r = fn(iv_panel, ivm)
                out[name] = {"theta2": (float(r.theta[1]), float(r.theta_se[1])),
                             "mu1": (float(r.slope[0]), float(r.slope_se[0]))}
            except (FEGMMError, np.linalg.LinAlgError) as exc:
                out[name] = exc
    if any(e in estimators for e in ("OLS-RC", "BC-OLS", "IBC-OLS")):
        out.update(_rc_family(select_columns(panel, OLS_COLUMNS), ols_model(), ell, "OLS-RC", "OLS"))
    if any(e in estimators for e in ("IV-RC", "BC-IV", "IBC-IV")):
        out.update(_rc_family(iv_panel, ivm, ell, "IV-RC", "IV"))
    return {k: v for k, v in out.items() if k in estimators}


# -- harness ------------------------------------------------------------------

def rep_rng(seed: int, cell: int, rep: int) -> np.random.Generator:
    """Independent stream for one replication, derived from the master seed by counter."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(cell, rep)))


def _one_rep(args):
    design, cell, rep, seed, ell, estimators = args
    sim = generate_panel(design, rep_rng(seed, cell, rep))
    with warnings.catch_warnings():
        # floored dispersions are expected in some replications
        warnings.simplefilter("ignore", RuntimeWarning)
        res = estimate_all(sim.panel, ell, estimators)
    return {k: (v if isinstance(v, dict) else repr(v)) for k, v in res.items()}


@dataclass(frozen=True)
class McSummary:
    """Bias, SD, SE/SD and rejection rate for one (design cell, estimator, parameter)."""

    psi: float
    rho1: float
    estimator: str
    parameter: str
    bias: float
    sd: float
    se_sd: float
    p05: float
    reps: int
    failures: int

    def row(self) -> dict:
        return asdict(self)


def summarize(results: list[dict], truth: dict, design, estimators=ESTIMATORS) -> list[McSummary]:
    out = []
    for est in estimators:
        for par in PARAMETERS:
            vals, ses, fails = [], [], 0
            for r in results:
                v = r.get(est)
                if not isinstance(v, dict):
                    fails += 1
                    continue
                if par not in v:
                    break
                e, s = v[par]
                if not (math.isfinite(e) and math.isfinite(s)):
                    fails += 1
                    continue
                vals.append(e)
                ses.append(s)
            else:
                if not vals:
                    continue
                x = np.array(vals)
                s = np.array(ses)
                sd = float(x.std(ddof=1)) if x.size > 1 else float("nan")
                err = x - truth[par]
                out.append(McSummary(design.psi, design.rho1, est, par, float(err.mean()), sd,
                                     float(s.mean() / sd) if sd > 0 else float("nan"),
                                     float(np.mean(np.abs(err) / s > Z_CRIT)), int(x.size), fails))
    return out


def default_workers() -> int:
    env = os.environ.get("PANEL_FEGMM_THREADS")
    return max(1, int(env)) if env else 1


def run_cell(design, reps: int, seed: int, cell: int = 0, ell=None, estimators=ESTIMATORS,
             workers: int | None = None) -> list[McSummary]:
    workers = default_workers() if workers is None else max(1, int(workers))
    tasks = [(design, cell, r, seed, ell, tuple(estimators)) for r in range(reps)]
    if workers == 1:
        results = [_one_rep(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_rep, tasks, chunksize=max(1, reps // (4 * workers))))
    truth = {"theta2": design.theta2, "mu1": design.mu1, "sigma1": design.sigma1}
    return summarize(results, truth, design, estimators)


PSI_GRID = (2.0, 4.0, 6.0)
RHO1_GRID = (0.0, 0.3, 0.6, 0.9)


def run_table(base: RationalAddictionDesign | None = None, psi_grid=PSI_GRID, rho1_grid=RHO1_GRID,
              reps: int = 1000, seed: int = 0, ell=None, estimators=ESTIMATORS,
              workers: int | None = None) -> list[McSummary]:
    """All cells of the grid; cell ``k`` in grid order uses seed stream ``(seed, k, rep)``."""
    base = base or RationalAddictionDesign()
    out = []
    cell = 0
    for rho1 in rho1_grid:
        for psi in psi_grid:
            d = replace(base, psi=float(psi), rho1=float(rho1))
            out.extend(run_cell(d, reps, seed, cell, ell, estimators, workers))
            cell += 1
    return out


SUMMARY_FIELDS = ("psi", "rho1", "estimator", "parameter", "bias", "sd", "se_sd", "p05", "reps", "failures")


def summaries_to_csv(rows: list[McSummary], config: dict | None = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        d = r.row()
        w.writerow([f"{d[k]:.10g}" if isinstance(d[k], float) else d[k] for k in SUMMARY_FIELDS])
    return buf.getvalue()


_TITLES = {"theta2": "Common parameter theta2", "mu1": "Mean of the individual-specific coefficient",
           "sigma1": "Standard deviation of the individual-specific coefficient"}


def format_table(rows: list[McSummary], parameter: str) -> str:
    """Text table for one parameter: a block per (rho1, psi) cell, a column per estimator."""
    rows = [r for r in rows if r.parameter == parameter]
    ests = [e for e in ESTIMATORS if any(r.estimator == e for r in rows)]
    lines = [_TITLES.get(parameter, parameter), ""]
    head = f"{'':14s}" + "".join(f"{e:>9s}" for e in ests)
    lines += [head, "-" * len(head)]
    cells = sorted({(r.rho1, r.psi) for r in rows})
    for rho1, psi in cells:
        lines.append(f"rho1 = {rho1:g}, psi = {psi:g}")
        sub = {r.estimator: r for r in rows if r.rho1 == rho1 and r.psi == psi}
        for label, key in (("Bias", "bias"), ("SD", "sd"), ("SE/SD", "se_sd"), ("p;.05", "p05")):
            vals = "".join(f"{getattr(sub[e], key):9.2f}" if e in sub else f"{'':9s}" for e in ests)
            lines.append(f"  {label:12s}" + vals)
    return "\n".join(lines) + "\n"
