import csv
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest

from panel_fegmm.cli import build_model, main

GOLDEN = Path(__file__).parent / "data" / "golden_summary.csv"
GOLDEN_ARGS = ["montecarlo", "--reps", "3", "--psi-grid", "2", "--rho1-grid", "0", "0.6", "--seed", "11"]


def _read_summary(text):
    lines = text.splitlines()
    config = json.loads(lines[0].removeprefix("# config: "))
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    return config, rows


def test_montecarlo_matches_golden_table(tmp_path):
    t0 = time.perf_counter()
    assert main(GOLDEN_ARGS + ["--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 10
    got_cfg, got = _read_summary((tmp_path / "summary.csv").read_text())
    ref_cfg, ref = _read_summary(GOLDEN.read_text())
    got_cfg.pop("version"), ref_cfg.pop("version")
    assert got_cfg == ref_cfg
    assert [(r["psi"], r["rho1"], r["estimator"], r["parameter"]) for r in got] == \
        [(r["psi"], r["rho1"], r["estimator"], r["parameter"]) for r in ref]
    for g, r in zip(got, ref):
        for k in ("bias", "sd", "se_sd", "p05", "reps", "failures"):
            assert float(g[k]) == pytest.approx(float(r[k]), rel=1e-7, abs=1e-12)
    assert (tmp_path / "tables.txt").read_text().count("SE/SD") == 6
    assert json.loads((tmp_path / "config.json").read_text())["reps"] == 3


def test_simulate_then_estimate(tmp_path):
    sim, est = tmp_path / "sim", tmp_path / "est"
    assert main(["simulate", "--psi", "4", "--seed", "2", "--out", str(sim)]) == 0
    truth = json.loads((sim / "truth.json").read_text())
    assert truth["theta"] == [0.45, 0.27] and truth["design"]["psi"] == 4.0
    rc = main(["estimate", "--data", str(sim / "panel.csv"), "--schema", str(sim / "schema.json"),
               "--steps", "1", "--correct", "ibc", "--functional", "mean_effect:1",
               "--functional", "sd_effect:1", "--truth", str(sim / "truth.json"), "--out", str(est)])
    assert rc == 0
    rep = json.loads((est / "report.json").read_text())
    assert rep["n"] == 51 and len(rep["theta"]) == 2
    assert rep["correction"]["method"] == "IBC"
    assert np.allclose(np.array(rep["correction"]["theta"]) - truth["theta"], rep["correction"]["theta_error"])
    assert [f["name"] for f in rep["functionals"]] == ["mean_effect[1]", "sd_effect[1]"]
    effects = list(csv.reader((est / "effects.csv").open()))
    assert effects[0] == ["id", "alpha0", "alpha1", "alpha0_corrected", "alpha1_corrected"]
    assert len(effects) == 52


def test_estimate_variance_components(tmp_path, rng):
    path = tmp_path / "vc.csv"
    y = rng.normal(size=(6, 5)) + rng.normal(size=(6, 1))
    path.write_text("id,time,y\n" + "".join(f"{i},{t},{float(y[i, t])!r}\n" for i in range(6) for t in range(5)))
    rc = main(["estimate", "--data", str(path), "--schema", '{"id": "id", "time": "time", "y": "y"}',
               "--model", "variance_components", "--functional", "mean_effect", "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["functionals"][0]["point"] == pytest.approx(y.mean())


def test_bad_input_exits_with_error_payload(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("id,time,y\n1,1,0.5\n1,1,0.7\n")
    rc = main(["estimate", "--data", str(path), "--schema", '{"id": "id", "time": "time", "y": "y"}',
               "--model", "variance_components", "--out", str(tmp_path)])
    assert rc == 1
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "DataError" and payload["message"]
    assert json.loads((tmp_path / "error.json").read_text()) == payload


def test_unknown_model_is_an_error(tmp_path):
    with pytest.raises(ValueError):
        build_model("probit", {})
    assert build_model("linear_rc_iv", {"x1": ["a", "b"], "x2": "c", "w2": ["d", "e"]}).dims.d_g == 4
    assert build_model("linear_rc_iv:1,1,1", {}).dims.d_theta == 1
