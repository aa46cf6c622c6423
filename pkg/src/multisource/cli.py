"""Command-line front end: dataset ingestion, estimation, simulation.

Dataset CSV contract (one row per unit):
  id, member_<j> (0/1 per source, 1-based), selected_<j> (0/1),
  auxiliary columns v_* (always present), analysis columns x_* (may be
  empty for unselected rows).  Survival datasets instead use columns
  time, status, z_* for the analysis part.  For linear/logistic models the
  first x_* column is the response and the rest are covariates (an
  intercept column is added automatically).

Design JSON: {"N": <int or "unknown">, "mode": "wor"|"bernoulli"|
"stratified-wor", "fractions": [...], "N_source": [...], "seed": <int>}.
Only N (and optionally N_source) matters for estimation; the rest
configures simulation.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
Diagnostics go to standard error; results go to files only.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import calibration as cal_mod
from . import estimators as est_mod
from . import rho as rho_mod
from . import simulate as sim_mod
from .hmeasure import HMeasure
from .model import MergedSample, SourceLayout, mask_bits

RHO_FLAGS = {
    "balanced": rho_mod.BALANCED,
    "single-frame": rho_mod.SINGLE_FRAME,
    "opt-bernoulli": rho_mod.OPT_BERNOULLI,
    "opt-wor": rho_mod.OPT_WOR,
}
CAL_FLAGS = {
    "none": None,
    "standard": cal_mod.STANDARD,
    "source": cal_mod.SOURCE_SPECIFIC,
    "sample": cal_mod.SAMPLE_SPECIFIC,
}
G_FLAGS = {
    "affine": cal_mod.AFFINE,
    "logistic": cal_mod.LOGISTIC_SHIFTED,
}


class ValidationError(Exception):
    """Input/schema problem: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


# ---------------------------------------------------------------------------
# dataset / design ingestion

def read_design(path):
    try:
        with open(path) as fh:
            design = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read design JSON {path}: {exc}")
    return design


def read_dataset(path, model, design=None):
    """Parse the dataset CSV into a MergedSample plus the row ids."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise ValidationError(f"cannot read dataset CSV {path}: {exc}")

    member_cols = sorted((c for c in df.columns if c.startswith("member_")),
                         key=lambda c: int(c.split("_")[1]))
    selected_cols = sorted((c for c in df.columns if c.startswith("selected_")),
                           key=lambda c: int(c.split("_")[1]))
    if not member_cols:
        raise ValidationError("no member_<j> columns found")
    if len(member_cols) != len(selected_cols):
        raise ValidationError("member_<j> and selected_<j> columns must pair up")
    J = len(member_cols)

    v_cols = [c for c in df.columns if c.startswith("v_")]
    if not v_cols:
        raise ValidationError("no v_* auxiliary columns found")
    if model == "cox":
        x_cols = ["time", "status"] + [c for c in df.columns
                                       if c.startswith("z_")]
        missing_cols = [c for c in ("time", "status") if c not in df.columns]
        if missing_cols:
            raise ValidationError(
                f"survival dataset needs columns {missing_cols}"
            )
    else:
        x_cols = [c for c in df.columns if c.startswith("x_")]
        if model is not None and not x_cols:
            raise ValidationError("no x_* analysis columns found")

    member_mask = np.zeros(len(df), dtype=np.int64)
    selected = np.zeros(len(df), dtype=np.int64)
    for j, (mc, sc) in enumerate(zip(member_cols, selected_cols)):
        member_mask |= (df[mc].to_numpy().astype(np.int64) != 0) << j
        selected |= (df[sc].to_numpy().astype(np.int64) != 0) << j

    x = df[x_cols].to_numpy(dtype=float) if x_cols else None
    v = df[v_cols].to_numpy(dtype=float)

    design = design or {}
    N = design.get("N", len(df))
    if N == "unknown":
        N = None
    N_source = design.get("N_source")

    sample = MergedSample(x, v, member_mask, selected, N=N,
                          N_source=N_source, n_sources=J)

    ids = (df["id"] if "id" in df.columns
           else pd.Series(np.arange(len(df)))).to_numpy()
    bad = (selected & ~member_mask) != 0
    for i in np.nonzero(bad)[0][:10]:
        raise ValidationError(
            f"row id={ids[i]}: selected in a source without membership"
        )
    if x is not None and x.shape[1]:
        missing = (selected != 0) & np.isnan(x).any(axis=1)
        for i in np.nonzero(missing)[0][:1]:
            raise ValidationError(
                f"row id={ids[i]}: selected but analysis columns are missing"
            )
    return sample, ids, v_cols


def _parse_cols(spec, v_cols):
    """Calibration variables: comma-separated v column names or indices."""
    if spec is None:
        return None
    out = []
    for tok in spec.split(","):
        tok = tok.strip()
        if tok in v_cols:
            out.append(v_cols.index(tok))
        elif f"v_{tok}" in v_cols:
            out.append(v_cols.index(f"v_{tok}"))
        else:
            try:
                out.append(int(tok))
            except ValueError:
                raise ValidationError(
                    f"unknown calibration variable {tok!r}; "
                    f"available: {', '.join(v_cols)}"
                )
    return out


def _dummy_layout(J):
    return SourceLayout(J, lambda arr: np.zeros(arr.shape[0], dtype=np.int64))


def _fit_sample(model, meas):
    x = meas.sample.x
    if model == "cox":
        return est_mod.fit_cox(meas, x[:, 0], x[:, 1], x[:, 2:])
    z = np.column_stack([np.ones(x.shape[0]), x[:, 1:]])
    if model == "linear":
        return est_mod.fit_linear(meas, x[:, 0], z)
    return est_mod.fit_logistic(meas, x[:, 0], z)


def build_measure_from_args(sample, args, v_cols, model):
    layout = _dummy_layout(sample.n_sources)
    kind = RHO_FLAGS[args.rho]
    params = {}
    if kind == rho_mod.OPT_BERNOULLI and getattr(args, "p", None):
        params["p"] = tuple(float(t) for t in args.p.split(","))
    recipe = rho_mod.RhoRecipe(kind, params)
    f = None
    if kind == rho_mod.OPT_WOR:
        pilot = HMeasure(sample, rho_mod.build_scheme(
            rho_mod.RhoRecipe(rho_mod.BALANCED), layout, sample))
        f = _fit_sample(model, pilot).diagnostics["influence"][:, 0]
    scheme = rho_mod.build_scheme(recipe, layout, sample, f=f)
    meas = HMeasure(sample, scheme)
    method = CAL_FLAGS[args.calibrate]
    if method:
        cols = _parse_cols(args.calibrate_vars, v_cols)
        meas = cal_mod.calibrate(meas, method,
                                 cal_mod.GFunction(G_FLAGS[args.g]),
                                 columns=cols)
    return meas


# ---------------------------------------------------------------------------
# serialization helpers (field order fixed for byte stability)

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2)
        fh.write("\n")


def fit_to_dict(model, fit):
    diag = {k: v for k, v in fit.diagnostics.items() if k != "influence"}
    return {
        "model": model,
        "theta_hat": fit.theta_hat,
        "se": fit.se,
        "var_population": fit.var_population,
        "var_design": list(fit.var_design),
        "n_used": fit.n_used,
        "N_effective": fit.N_effective,
        "diagnostics": diag,
    }


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_estimate(args):
    design = read_design(args.design) if args.design else {}
    if args.unknown_N:
        design = dict(design, N="unknown")
    sample, ids, v_cols = read_dataset(args.data, args.model, design)
    meas = build_measure_from_args(sample, args, v_cols, args.model)
    fit = _fit_sample(args.model, meas)
    out = _outdir(args)
    write_json(out / "fit.json", fit_to_dict(args.model, fit))
    infl = fit.diagnostics["influence"]
    cols = {"id": ids}
    for k in range(infl.shape[1]):
        cols[f"influence_{k + 1}"] = infl[:, k]
    pd.DataFrame(cols).to_csv(out / "influence.csv", index=False)
    print(f"wrote {out / 'fit.json'} and {out / 'influence.csv'}",
          file=sys.stderr)
    return 0


def cmd_calibrate(args):
    design = read_design(args.design) if args.design else {}
    sample, ids, v_cols = read_dataset(args.data, None, design)
    layout = _dummy_layout(sample.n_sources)
    recipe = rho_mod.RhoRecipe(RHO_FLAGS[args.rho])
    scheme = rho_mod.build_scheme(recipe, layout, sample)
    base = HMeasure(sample, scheme)
    method = CAL_FLAGS[args.calibrate]
    if method is None:
        raise ValidationError("calibrate command needs --calibrate != none")
    cols = _parse_cols(args.calibrate_vars, v_cols)
    cal = cal_mod.calibrate(base, method, cal_mod.GFunction(G_FLAGS[args.g]),
                            columns=cols)
    out = _outdir(args)
    write_json(out / "calibration.json", {
        "method": method,
        "g": G_FLAGS[args.g],
        "alpha": [a for a in cal.alpha],
        "N_estimate_before": base.estimate_N(),
        "N_estimate_after": cal.estimate_N(),
    })
    pd.DataFrame({
        "id": ids,
        "weight_raw": base.weights,
        "weight_calibrated": cal.weights,
    }).to_csv(out / "weights.csv", index=False)
    print(f"wrote {out / 'calibration.json'} and {out / 'weights.csv'}",
          file=sys.stderr)
    return 0


def cmd_weights(args):
    if args.data:
        design = read_design(args.design) if args.design else {}
        sample, _, _ = read_dataset(args.data, None, design)
        J = sample.n_sources
        layout = _dummy_layout(J)
        recipe = rho_mod.RhoRecipe(RHO_FLAGS[args.rho])
        if args.rho == "opt-bernoulli" and args.p:
            recipe = rho_mod.RhoRecipe(
                rho_mod.OPT_BERNOULLI,
                {"p": tuple(float(t) for t in args.p.split(","))})
        scheme = rho_mod.build_scheme(recipe, layout, sample)
    else:
        if not args.p:
            raise ValidationError("weights without --data needs --p fractions")
        p = tuple(float(t) for t in args.p.split(","))
        layout = _dummy_layout(len(p))
        if args.rho == "opt-bernoulli":
            scheme = rho_mod.optimal_rho_bernoulli(p, layout)
        elif args.rho == "balanced":
            scheme = rho_mod.balanced_rho(layout)
        else:
            raise ValidationError(
                "weights without --data supports --rho balanced/opt-bernoulli"
            )
    cells = {}
    for mask, c in sorted(scheme.cells.items()):
        key = ",".join(str(j + 1) for j in mask_bits(mask))
        cells[key] = c
    out = _outdir(args)
    write_json(out / "weights.json", {"rho": args.rho, "cells": cells})
    print(f"wrote {out / 'weights.json'}", file=sys.stderr)
    return 0


def _scenario_from_args(args):
    overrides = {}
    if args.n is not None:
        overrides["N"] = args.n
    if args.reps is not None:
        overrides["n_reps"] = args.reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.rho is not None:
        overrides["rho"] = rho_mod.RhoRecipe(RHO_FLAGS[args.rho])
    if getattr(args, "calibrate", None) not in (None, "none"):
        overrides["calibration"] = CAL_FLAGS[args.calibrate]
        overrides["g_kind"] = G_FLAGS[args.g]
    if getattr(args, "unknown_N", False):
        overrides["unknown_N"] = True
    try:
        scenario = sim_mod.get_scenario(args.preset, **overrides)
    except KeyError as exc:
        raise ValidationError(str(exc.args[0]))
    if getattr(args, "calibrate_vars", None):
        cols = [int(t) for t in args.calibrate_vars.split(",")]
        scenario = sim_mod.get_scenario(args.preset, **overrides,
                                        calibrate_cols=tuple(cols))
    return scenario


def _write_summary(out, scenario, summary):
    rows = []
    for k in range(summary.theta0.size):
        rows.append({
            "N": scenario.N,
            "coef": k + 1,
            "theta0": summary.theta0[k],
            "bias": summary.bias()[k],
            "sd": summary.sd()[k],
            "see": summary.see()[k],
            "coverage": summary.coverage()[k],
            "failures": len(summary.failures),
            "replicates": summary.n_requested,
            "unstable": summary.unstable,
        })
    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False)
    cols = {"replicate": summary.replicate}
    for k in range(summary.theta0.size):
        cols[f"theta_{k + 1}"] = summary.theta[:, k]
    for k in range(summary.theta0.size):
        cols[f"se_{k + 1}"] = summary.se[:, k]
    pd.DataFrame(cols).to_csv(out / "rows.csv", index=False)


def cmd_simulate(args):
    scenario = _scenario_from_args(args)
    summary = sim_mod.run_scenario(scenario)
    out = _outdir(args)
    _write_summary(out, scenario, summary)
    try:
        qq = sim_mod.qq_data(summary, coef=args.qq_coef - 1)
        pd.DataFrame(qq, columns=["normal_quantile", "standardized"]).to_csv(
            out / "qq.csv", index=False)
    except ValueError as exc:
        print(f"qq.csv skipped: {exc}", file=sys.stderr)
    if summary.unstable:
        print(f"warning: UNSTABLE — failure rate "
              f"{summary.failure_rate:.1%}", file=sys.stderr)
    for r, msg in summary.failures:
        print(f"replicate {r} failed: {msg}", file=sys.stderr)
    print(f"wrote summary.csv, rows.csv in {out}", file=sys.stderr)
    return 0


COMPARE_ROWS = [("S", rho_mod.OPT_BERNOULLI), ("SF", rho_mod.SINGLE_FRAME),
                ("B", rho_mod.BALANCED)]
COMPARE_COLS = [("w/o", None), ("SC", cal_mod.SAMPLE_SPECIFIC),
                ("C", cal_mod.STANDARD), ("DC", cal_mod.SOURCE_SPECIFIC)]


def cmd_compare(args):
    scenario = _scenario_from_args(args)
    if scenario.calibrate_cols is None and scenario.model == est_mod.COX:
        # calibrate survival presets on the surrogate and follow-up columns
        scenario = sim_mod.get_scenario(
            args.preset, calibrate_cols=(sim_mod.COX_V_U, sim_mod.COX_V_Y),
            N=scenario.N, n_reps=scenario.n_reps, seed=scenario.seed)
    recipes = [rho_mod.RhoRecipe(kind) for _, kind in COMPARE_ROWS]
    cals = [c for _, c in COMPARE_COLS]
    grid = sim_mod.compare_weights(scenario, recipes, cals)
    coef = args.coef - 1
    rows = []
    for rname, rkind in COMPARE_ROWS:
        row = {"rho": rname}
        for cname, c in COMPARE_COLS:
            cell = grid[(rkind, c)]
            row[f"sd_{cname}"] = (cell.sd()[coef] if cell.theta.size
                                  else float("nan"))
            row[f"see_{cname}"] = (cell.see()[coef] if cell.theta.size
                                   else float("nan"))
        rows.append(row)
    out = _outdir(args)
    pd.DataFrame(rows).to_csv(out / "compare.csv", index=False)
    n_fail = sum(len(cell.failures) for cell in grid.values())
    if n_fail:
        print(f"{n_fail} cell replicates failed", file=sys.stderr)
    print(f"wrote {out / 'compare.csv'}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common_flags(p, with_model=False):
    if with_model:
        p.add_argument("--model", choices=["linear", "logistic", "cox"],
                       required=True)
    p.add_argument("--rho", choices=sorted(RHO_FLAGS), default="balanced")
    p.add_argument("--p", help="comma-separated sampling fractions")
    p.add_argument("--calibrate", choices=sorted(CAL_FLAGS), default="none")
    p.add_argument("--calibrate-vars",
                   help="comma-separated v column names or indices")
    p.add_argument("--g", choices=sorted(G_FLAGS), default="affine")
    p.add_argument("--out", default=".", help="output directory")


def build_parser():
    parser = _Parser(prog="multisource",
                     description="Estimation from merged overlapping sources "
                                 "with unidentified duplication.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit a model to a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--design")
    p.add_argument("--unknown-N", action="store_true", dest="unknown_N")
    _add_common_flags(p, with_model=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("calibrate", help="calibrate weights on a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--design")
    _add_common_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("weights", help="emit duplication-weight cell constants")
    p.add_argument("--data")
    p.add_argument("--design")
    p.add_argument("--rho", choices=sorted(RHO_FLAGS), default="balanced")
    p.add_argument("--p", help="comma-separated sampling fractions")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--unknown-N", action="store_true", dest="unknown_N")
    p.add_argument("--qq-coef", type=int, default=1)
    _add_common_flags(p)
    p.set_defaults(func=cmd_simulate, rho=None)

    p = sub.add_parser("compare",
                       help="weighting-by-calibration comparison grid")
    p.add_argument("--preset", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--coef", type=int, default=1)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_compare, rho=None, calibrate=None,
                   calibrate_vars=None, g="affine", unknown_N=False)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (est_mod.FitError, cal_mod.CalibrationError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
