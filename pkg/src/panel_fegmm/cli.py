"""Command-line front end: ``panel-fegmm {estimate,simulate,montecarlo}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bias import correct
from .errors import FEGMMError
from .functionals import FUNCTIONALS, estimate_functional, parse_functional
from .gmm import fit
from .montecarlo import (ESTIMATORS, PARAMETERS, PSI_GRID, RHO1_GRID, RationalAddictionDesign,
                         format_table, generate_panel, run_table, summaries_to_csv)
from .moments import linear_rc_iv, variance_components
from .panel import CsvSchema, load_csv, write_csv

MODELS = ("linear_rc_iv", "variance_components")


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("PANEL_FEGMM_THREADS")
    return max(1, int(env)) if env else 1


def _read_json_arg(value: str) -> dict:
    """A JSON object given inline or as a file path."""
    text = value.strip()
    if not text.startswith("{"):
        text = Path(value).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON in {value!r}: {exc}") from None
    if not isinstance(obj, dict):
        raise ValueError(f"expected a JSON object in {value!r}")
    return obj


def _groups(schema: dict) -> tuple[int, int, int]:
    def count(k):
        v = schema.get(k)
        return 0 if v is None else (1 if isinstance(v, str) else len(v))
    return count("x1"), count("x2"), count("w2")


def build_model(spec: str, schema: dict):
    """``linear_rc_iv`` (sizes from the schema's column groups or ``linear_rc_iv:dx1,dx2,dw2``)
    or ``variance_components``."""
    name, _, arg = spec.partition(":")
    if name == "variance_components":
        return variance_components()
    if name == "linear_rc_iv":
        dims = tuple(int(a) for a in arg.split(",")) if arg else _groups(schema)
        if len(dims) != 3 or min(dims) < 0 or dims[0] < 1:
            raise ValueError("linear_rc_iv needs sizes dx1,dx2,dw2 (schema groups x1, x2, w2)")
        return linear_rc_iv(*dims)
    raise ValueError(f"unknown model {name!r}; known: {list(MODELS)}")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _config(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    d["version"] = __version__
    return d


# -- estimate -----------------------------------------------------------------

def cmd_estimate(args) -> dict:
    schema_map = _read_json_arg(args.schema)
    schema = CsvSchema.from_mapping(schema_map)
    panel = load_csv(args.data, schema)
    model = build_model(args.model, schema_map)
    workers = _workers(args)
    functionals = [parse_functional(f) for f in args.functional]

    report = fit(panel, model, steps=args.steps, workers=workers)
    corr = None
    if args.correct != "none":
        corr = correct(report, args.correct, args.trim, args.bias_method, workers)

    out = {
        "config": _config(args),
        "n": panel.n, "T_bar": panel.T_bar,
        "step": report.step,
        "theta": report.theta, "theta_se": report.se,
        "score_norm": report.score_norm, "iterations": report.iterations,
    }
    if corr is not None:
        out["correction"] = {"method": corr.method, "theta": corr.theta, "theta_se": corr.se,
                             "bias": corr.bias, "iterations": corr.iterations, "residual": corr.residual}
    out["functionals"] = [estimate_functional(report, f, corr, args.trim, args.bias_method).as_dict()
                          for f in functionals]
    if args.truth:
        truth = _read_json_arg(args.truth)
        if "theta" in truth:
            th = np.asarray(truth["theta"], dtype=float)
            out["theta_error"] = report.theta - th
            if corr is not None:
                out["correction"]["theta_error"] = corr.theta - th

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "report.json", out)
    with (outdir / "effects.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d_a = report.alphas.shape[1]
        head = ["id"] + [f"alpha{k}" for k in range(d_a)]
        if corr is not None:
            head += [f"alpha{k}_corrected" for k in range(d_a)]
        w.writerow(head)
        for i, e in enumerate(report.effects):
            row = [e.id] + [repr(float(v)) for v in e.alpha]
            if corr is not None:
                row += [repr(float(v)) for v in corr.effects[i].alpha]
            w.writerow(row)
    with (outdir / "functionals.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "point", "bias", "corrected", "se", "estimate"])
        for f in out["functionals"]:
            w.writerow([f["name"]] + [repr(float(f[k])) for k in ("point", "bias", "corrected", "se",
                                                                   "estimate")])
    lines = [f"theta     = {np.array2string(report.theta, precision=6)}",
             f"theta se  = {np.array2string(report.se, precision=6)}"]
    if corr is not None:
        lines.append(f"{corr.method:9s} = {np.array2string(corr.theta, precision=6)}")
    for f in out["functionals"]:
        lines.append(f"{f['name']:20s} {f['estimate']: .6g} (se {f['se']:.4g})")
    print("\n".join(lines))
    return out


# -- simulate -----------------------------------------------------------------

def _design(args) -> RationalAddictionDesign:
    d = RationalAddictionDesign.from_dict(_read_json_arg(args.design)) if args.design else RationalAddictionDesign()
    over = {k: getattr(args, k) for k in ("psi", "rho1") if getattr(args, k, None) is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(d, **over) if over else d


PRESET_SCHEMA = {"id": "id", "time": "time", "y": "C", "x1": ["const", "P"], "x2": ["C_lag", "C_lead"],
                 "w2": ["P_lag", "P_lead", "Tax", "Tax_lag", "Tax_lead"]}


def cmd_simulate(args) -> dict:
    design = _design(args)
    sim = generate_panel(design)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(sim.panel, outdir / "panel.csv")
    truth = dict(sim.truth, theta=[design.theta1, design.theta2], alpha=sim.alpha,
                 design=design.to_dict(), config=_config(args))
    _write_json(outdir / "truth.json", truth)
    _write_json(outdir / "schema.json", PRESET_SCHEMA)
    print(f"wrote {sim.panel.n} individuals x {sim.truth['T_usable']} periods to {outdir / 'panel.csv'}")
    return truth


# -- montecarlo ---------------------------------------------------------------

def cmd_montecarlo(args) -> list:
    design = _design(args)
    seed = design.seed if args.seed is None else args.seed
    psi = args.psi_grid or ([design.psi] if args.psi is not None else list(PSI_GRID))
    rho1 = args.rho1_grid or ([design.rho1] if args.rho1 is not None else list(RHO1_GRID))
    estimators = tuple(args.estimators) if args.estimators else ESTIMATORS
    t0 = time.perf_counter()
    rows = run_table(design, psi, rho1, args.reps, seed, args.trim, estimators, _workers(args))
    config = {"design": design.to_dict(), "psi_grid": psi, "rho1_grid": rho1, "reps": args.reps,
              "seed": seed, "trim": args.trim, "estimators": list(estimators), "version": __version__}
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "summary.csv").write_text(summaries_to_csv(rows, config))
    text = "\n".join(format_table(rows, p) for p in PARAMETERS)
    (outdir / "tables.txt").write_text(text)
    _write_json(outdir / "config.json", config)
    print(text)
    print(f"{len(rows)} summary rows in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return rows


# -- parser -------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default: PANEL_FEGMM_THREADS or 1)")
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panel-fegmm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit a model to a long-format CSV panel")
    p.add_argument("--data", required=True, help="CSV file")
    p.add_argument("--schema", required=True, help="schema JSON (file or inline)")
    p.add_argument("--model", default="linear_rc_iv", help=f"one of {list(MODELS)}")
    p.add_argument("--steps", type=int, choices=(1, 2), default=2)
    p.add_argument("--correct", choices=("none", "bc", "ibc", "sbc"), default="none")
    p.add_argument("--bias-method", choices=("auto", "general", "model"), default="auto")
    p.add_argument("--trim", type=int, default=None, help="trimming lag (default floor(T^(1/3)))")
    p.add_argument("--functional", action="append", default=[],
                   help=f"name or name:k; known: {sorted(FUNCTIONALS)}")
    p.add_argument("--truth", default=None, help="truth JSON from 'simulate' to report estimation errors")
    _common(p)
    p.set_defaults(func=cmd_estimate)

    for name, fn, hlp in (("simulate", cmd_simulate, "simulate one panel from the rational-addiction design"),
                          ("montecarlo", cmd_montecarlo, "run the simulation tables")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--design", default=None, help="design JSON (file or inline)")
        p.add_argument("--psi", type=float, default=None)
        p.add_argument("--rho1", type=float, default=None)
        _common(p)
        p.set_defaults(func=fn)
        if name == "montecarlo":
            p.add_argument("--reps", type=int, default=1000)
            p.add_argument("--trim", type=int, default=None)
            p.add_argument("--psi-grid", type=float, nargs="+", default=None)
            p.add_argument("--rho1-grid", type=float, nargs="+", default=None)
            p.add_argument("--estimators", nargs="+", choices=ESTIMATORS, default=None)
    return parser


def error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, FEGMMError) and exc.ids:
        payload["ids"] = exc.ids
    return payload


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (FEGMMError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        payload = error_payload(exc)
        print(json.dumps(payload), file=sys.stderr)
        try:
            outdir = Path(args.out)
            outdir.mkdir(parents=True, exist_ok=True)
            _write_json(outdir / "error.json", payload)
        except OSError:
            pass
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
