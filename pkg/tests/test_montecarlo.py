import math
from dataclasses import replace

import numpy as np
import pytest

from panel_fegmm import montecarlo as mc
from panel_fegmm.montecarlo import RationalAddictionDesign, TaxSource


def small(**kw):
    base = dict(n=12, T=12)
    base.update(kw)
    return RationalAddictionDesign(**base)


def test_roots_at_calibration():
    p1, p2 = mc.roots(RationalAddictionDesign())
    assert round(p1, 2) == 0.31 and round(p2, 2) == 1.91
    d = RationalAddictionDesign()
    for p in (p1, p2):
        assert d.theta1 * p * p - p + d.theta2 == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("psi,rho1", [(2.0, 0.0), (6.0, 0.9)])
def test_plug_back_residual(psi, rho1):
    d = RationalAddictionDesign(psi=psi, rho1=rho1)
    sim = mc.generate_panel(d, np.random.default_rng(1))
    assert np.abs(mc.structural_residual(sim, d)).max() < 1e-6
    assert sim.truth["T_usable"] == d.T - 2
    assert sim.panel.columns == mc.COLUMNS


def test_constant_inputs_give_steady_state():
    d = small(sigma0=1e-300, sigma1=1e-300, sigma_eta0=1e-300, sigma_eta1=1e-300, sigma_u=1e-300,
              psi=0.0, tax=TaxSource(kind="ar1", sd=0.0))
    sim = mc.generate_panel(d, np.random.default_rng(2))
    a0, a1 = d.mu0, d.mu1
    level = (a0 + a1 * d.mu_eta0) / (1 - d.theta1 - d.theta2)
    np.testing.assert_allclose(sim.C_full, level, rtol=1e-8)


def test_lag_lead_columns_are_aligned():
    sim = mc.generate_panel(small(), np.random.default_rng(3))
    z = sim.panel.stacked()
    c = {name: k for k, name in enumerate(mc.COLUMNS)}
    np.testing.assert_array_equal(z[:, 1:, c["C_lag"]], z[:, :-1, c["C"]])
    np.testing.assert_array_equal(z[:, :-1, c["C_lead"]], z[:, 1:, c["C"]])
    np.testing.assert_array_equal(z[:, 1:, c["Tax_lag"]], z[:, :-1, c["Tax"]])
    np.testing.assert_array_equal(z[:, :-1, c["P_lead"]], z[:, 1:, c["P"]])


def test_generation_is_deterministic():
    d = small()
    a = mc.generate_panel(d, mc.rep_rng(5, 1, 2)).panel.stacked()
    b = mc.generate_panel(d, mc.rep_rng(5, 1, 2)).panel.stacked()
    c = mc.generate_panel(d, mc.rep_rng(5, 1, 3)).panel.stacked()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_estimate_all_reports_every_estimator():
    sim = mc.generate_panel(RationalAddictionDesign(), np.random.default_rng(4))
    res = mc.estimate_all(sim.panel)
    assert set(res) == set(mc.ESTIMATORS)
    for name in ("OLS-RC", "IV-RC", "BC-IV", "IBC-IV"):
        assert set(res[name]) == set(mc.PARAMETERS)
        for est, se in res[name].values():
            assert math.isfinite(est) and se > 0
    assert set(res["OLS-FC"]) == {"theta2", "mu1"}


@pytest.mark.filterwarnings("ignore:bias-corrected dispersion")
def test_failures_are_counted_not_raised():
    d = small(tax=TaxSource(kind="ar1", sd=0.0))  # constant tax: instruments are collinear
    res = mc.estimate_all(mc.generate_panel(d, np.random.default_rng(0)).panel)
    assert isinstance(res["IV-RC"], Exception)
    rows = mc.run_cell(d, 2, 0, estimators=("OLS-RC", "IV-RC"))
    assert all(r.estimator == "OLS-RC" for r in rows)


def test_summaries_and_worker_invariance():
    d = small(n=15, T=14)
    one = mc.run_cell(d, 4, 9, cell=3, workers=1, estimators=("OLS-FC", "IV-RC"))
    two = mc.run_cell(d, 4, 9, cell=3, workers=2, estimators=("OLS-FC", "IV-RC"))
    assert mc.summaries_to_csv(one) == mc.summaries_to_csv(two)
    r = next(x for x in one if x.estimator == "IV-RC" and x.parameter == "theta2")
    assert r.reps == 4 and r.failures == 0 and 0 <= r.p05 <= 1


def test_summarize_matches_hand_computation():
    results = [{"X": {"theta2": (0.3, 0.1)}}, {"X": {"theta2": (0.1, 0.1)}}, {"X": "ValueError()"}]
    (row,) = mc.summarize(results, {"theta2": 0.2}, small(), estimators=("X",))
    assert row.bias == pytest.approx(0.0)
    assert row.sd == pytest.approx(np.std([0.3, 0.1], ddof=1))
    assert row.se_sd == pytest.approx(0.1 / row.sd)
    assert row.p05 == 0.0 and row.failures == 1 and row.reps == 2


def test_csv_and_table_formatting():
    rows = [mc.McSummary(2.0, 0.0, "IV-RC", "theta2", 0.001, 0.05, 1.0, 0.05, 10, 0)]
    text = mc.summaries_to_csv(rows, {"seed": 0})
    assert text.splitlines()[0].startswith("# config:")
    assert text.splitlines()[1] == ",".join(mc.SUMMARY_FIELDS)
    assert "IV-RC" in mc.format_table(rows, "theta2")


def test_tax_file_source(tmp_path):
    d = small()
    L = d.T + 2 * d.horizon + 3
    path = tmp_path / "tax.csv"
    np.savetxt(path, np.linspace(0, 1, d.n * L).reshape(d.n, L), delimiter=",")
    sim = mc.generate_panel(replace(d, tax=TaxSource(kind="file", path=str(path))), np.random.default_rng(0))
    np.testing.assert_allclose(sim.raw["tax"][0, :3], np.linspace(0, 1, d.n * L)[:3])
    np.savetxt(path, np.ones((d.n, L - 1)), delimiter=",")
    with pytest.raises(ValueError, match="needs"):
        mc.generate_panel(replace(d, tax=TaxSource(kind="file", path=str(path))))


@pytest.mark.parametrize("kw", [dict(theta1=0.9, theta2=0.9), dict(theta1=-0.1), dict(sigma1=0.0),
                                dict(rho1=1.0), dict(T=3), dict(n=0)])
def test_design_validation(kw):
    with pytest.raises(ValueError):
        RationalAddictionDesign(**kw)


def test_tax_source_validation():
    with pytest.raises(ValueError):
        TaxSource(kind="walk")
    with pytest.raises(ValueError):
        TaxSource(kind="file")
    with pytest.raises(ValueError):
        TaxSource(rate=2.0)


def test_design_dict_round_trip():
    d = RationalAddictionDesign(psi=4.0, tax=TaxSource(kind="ar1", sd=0.15))
    assert RationalAddictionDesign.from_dict(d.to_dict()) == d


@pytest.mark.slow
def test_sigma1_bias_grows_with_psi():
    biases = []
    for k, psi in enumerate((2.0, 6.0)):
        rows = mc.run_cell(RationalAddictionDesign(psi=psi), 30, 0, cell=k, estimators=("IV-RC",))
        biases.append(next(r.bias for r in rows if r.parameter == "sigma1"))
    assert biases[1] > biases[0]
