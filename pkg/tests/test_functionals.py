import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panel_fegmm import linear_rc as lr
from panel_fegmm.bias import correct_ibc
from panel_fegmm.functionals import (FUNCTIONALS, MuFunctional, ZetaFunctional, _fd_grad, _fd_hess,
                                     builtin_mean_effect, builtin_sd_effect, estimate_functional,
                                     estimate_mu, estimate_sd, estimate_zeta, mu_core, parse_functional,
                                     register, variance_functional)
from panel_fegmm.gmm import fit, solve_common
from panel_fegmm.moments import variance_components
from panel_fegmm.panel import PanelDataset

from conftest import simulate_linear_panel


@pytest.fixture
def vc_fit(rng):
    y = rng.normal(size=(40, 1)) + rng.normal(size=(40, 10))
    return fit(PanelDataset.from_arrays(y[..., None]), variance_components(), steps=1), y


def test_mean_effect_on_variance_components(vc_fit):
    f, y = vc_fit
    ybar, s2 = y.mean(1), y.var(1)
    est = estimate_mu(f, builtin_mean_effect(0))
    assert est.point == pytest.approx(ybar.mean(), abs=1e-12)
    assert est.bias == 0.0
    assert est.variance == pytest.approx(ybar.var() + np.mean(s2 / 10), rel=1e-12)
    assert est.se == pytest.approx(np.sqrt(est.variance / 40))


def test_variance_toy_closed_form(vc_fit):
    f, y = vc_fit
    ybar, s2 = y.mean(1), y.var(1)
    ident = type("C", (), {"theta": np.zeros(0), "effects": f.effects, "estimator": None})()
    plain = estimate_sd(f, builtin_sd_effect(0))
    corrected = estimate_sd(f, builtin_sd_effect(0), correction=ident)
    assert plain.point ** 2 == pytest.approx(ybar.var(), rel=1e-12)
    assert corrected.estimate ** 2 == pytest.approx(ybar.var() - s2.mean() / 10, rel=1e-12)
    ddof1 = estimate_sd(f, builtin_sd_effect(0, ddof=1))
    assert ddof1.point ** 2 == pytest.approx(ybar.var(ddof=1), rel=1e-12)


def test_mu_core_variance_functional_bias_is_sigma():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(50, 2))
    S = np.array([np.diag(rng.uniform(0.5, 2, 2)) for _ in range(50)])
    B = np.zeros((50, 2))
    c = A[:, 1].mean()
    point, bias, corr, _ = mu_core(A, S, B, np.full(50, 8), 8.0, variance_functional(1, c), False)
    assert bias == pytest.approx(S[:, 1, 1].mean())
    assert corr == pytest.approx(point - bias / 8)


def test_mu_core_mean_bias_is_mean_B_alpha():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    S = np.tile(np.eye(2), (30, 1, 1))
    point, bias, corr, var = mu_core(A, S, B, np.full(30, 5), 5.0, builtin_mean_effect(1), True)
    assert bias == pytest.approx(B[:, 1].mean())
    # corrected dispersion: the bias of (mu - mean)^2 is 2 dev B + Sigma
    dev = A[:, 1] - A[:, 1].mean()
    disp = np.mean(dev ** 2) - np.mean(2 * dev * B[:, 1] + 1.0) / 5
    assert var == pytest.approx(max(disp, 0.0) + 1.0 / 5)


def test_negative_dispersion_is_floored_with_warning():
    A = np.zeros((5, 1)) + 1e-3 * np.arange(5)[:, None]
    S = np.tile(np.eye(1), (5, 1, 1))
    with pytest.warns(RuntimeWarning, match="negative"):
        _, _, _, var = mu_core(A, S, np.zeros((5, 1)), np.full(5, 4), 4.0, builtin_mean_effect(0), True)
    assert var == pytest.approx(1.0 / 4)


@settings(max_examples=30, deadline=None)
@given(a=st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_finite_difference_derivatives(a):
    a = np.array(a)
    f = lambda x: np.exp(x[0]) * np.sin(x[1])
    g = np.array([np.exp(a[0]) * np.sin(a[1]), np.exp(a[0]) * np.cos(a[1])])
    h = np.exp(a[0]) * np.array([[np.sin(a[1]), np.cos(a[1])], [np.cos(a[1]), -np.sin(a[1])]])
    np.testing.assert_allclose(_fd_grad(f, a), g, atol=1e-7)
    np.testing.assert_allclose(_fd_hess(f, a), h, atol=1e-5)


def test_analytic_and_numeric_mu_agree(rng, linear_model):
    panel, _ = simulate_linear_panel(rng, n=30, T=12)
    f = solve_common(panel, linear_model, lr.instrument_weights(lr.LinearRCData.from_panel(panel, linear_model)))
    mu_fd = MuFunctional("exp", lambda a: np.exp(0.3 * a[1]))
    mu_an = MuFunctional("exp", lambda a: np.exp(0.3 * a[1]),
                         lambda a: np.array([0.0, 0.3 * np.exp(0.3 * a[1])]),
                         lambda a: np.array([[0.0, 0.0], [0.0, 0.09 * np.exp(0.3 * a[1])]]))
    corr = correct_ibc(f)
    e1, e2 = estimate_mu(f, mu_fd, corr), estimate_mu(f, mu_an, corr)
    assert e1.estimate == pytest.approx(e2.estimate, rel=1e-6)
    assert e1.se == pytest.approx(e2.se, rel=1e-5)


def test_corrected_mean_effect_uses_corrected_effects(rng, linear_model):
    panel, _ = simulate_linear_panel(rng, n=30, T=12)
    f = solve_common(panel, linear_model, lr.instrument_weights(lr.LinearRCData.from_panel(panel, linear_model)))
    corr = correct_ibc(f)
    est = estimate_functional(f, builtin_mean_effect(1), corr)
    assert est.point == pytest.approx(corr.alphas[:, 1].mean(), abs=1e-12)
    assert est.estimate == est.corrected


def _sq_zeta(analytic):
    z = lambda z, th, a: (z[:, 0] - a[0]) ** 2
    if not analytic:
        return ZetaFunctional("sq", z)
    return ZetaFunctional("sq", z, lambda z, th, a: (-2 * (z[:, 0] - a[0]))[:, None],
                          lambda z, th, a: np.zeros((len(z), 0)),
                          lambda z, th, a: np.full((len(z), 1, 1), 2.0))


def test_zeta_squared_residual_oracle(vc_fit):
    f, y = vc_fit
    s2 = y.var(1)
    est = estimate_zeta(f, _sq_zeta(True), ell=0)
    assert est.point == pytest.approx(s2.mean(), rel=1e-12)
    # bias is -s^2: the residual loses one degree of freedom to alpha
    assert est.corrected == pytest.approx(s2.mean() * (1 + 1 / 10), rel=1e-10)
    num = estimate_zeta(f, _sq_zeta(False), ell=0)
    assert num.corrected == pytest.approx(est.corrected, rel=1e-6)
    assert num.se == pytest.approx(est.se, rel=1e-5)


def test_registry_and_parsing():
    assert set(FUNCTIONALS) >= {"mean_effect", "sd_effect"}
    assert parse_functional("mean_effect:1").name == "mean_effect[1]"
    assert parse_functional("sd_effect").k == 0
    register("half", lambda k=0: MuFunctional("half", lambda a: 0.5 * a[k]))
    try:
        assert parse_functional("half:0").value(np.array([4.0])) == 2.0
    finally:
        FUNCTIONALS.pop("half")
    with pytest.raises(ValueError, match="unknown functional"):
        parse_functional("nope")


def test_as_dict_round_trip(vc_fit):
    f, _ = vc_fit
    d = estimate_mu(f, builtin_mean_effect(0)).as_dict()
    assert set(d) == {"name", "point", "bias", "corrected", "variance", "se", "estimate"}
