"""Command-line front end: simulate, weight and estimate subcommands."""

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .data_model import (CohortSchema, DataValidationError, Provenance,
                         ReferenceSchema, WeightSet, _read_rows, fmt17,
                         load_cohort_csv, load_reference_csv)
from .estimate import (DegenerateSubgroupError, estimate_subgroup,
                       estimate_with_variance)
from .glm import DesignSpec, FitError, balancing_scores, participation_fit
from .kw import KernelSpec, OrphanReferenceError, kw_pseudoweights
from .nr import NrConfig, fit_response_model, kwnr_weights
from .sim import (PpsProbabilityError, SimScenario, SimulationFailureError,
                  run_study, write_metrics_json, write_replicates_csv,
                  write_table1_csv, write_table2_csv)

_WEIGHT_COLUMNS = ("kw_weight", "r_hat", "kwnr_weight")


class ConfigError(Exception):
    """Bad configuration file or option values."""


def _g4(value):
    """Console rendering: 4 significant digits."""
    return format(float(value), ".4g")


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _section(cfg, name):
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config field '{name}' must be an object")
    return value


def _build(cls, section, name, **extra):
    """Construct a config dataclass, reporting bad fields by key path."""
    try:
        return cls(**{**section, **extra})
    except TypeError as exc:
        raise ConfigError(f"config section '{name}': {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config section '{name}': {exc}") from exc


def _kernel_spec(cfg):
    return _build(KernelSpec, _section(cfg, "kernel"), "kernel")


def _nr_config(cfg):
    return _build(NrConfig, _section(cfg, "nr"), "nr")


def _design_spec(cfg):
    return _build(DesignSpec, _section(cfg, "design"), "design")


def config_hash(resolved):
    """Short digest of the resolved effective configuration."""
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"),
                       default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def resolve_out_dir(flag_value, cfg):
    """Priority: --out flag, then KWNR_OUT_DIR, then config, then cwd."""
    out = flag_value or os.environ.get("KWNR_OUT_DIR") or cfg.get("out_dir") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _verbosity(args, cfg):
    return max(getattr(args, "verbose", 0), int(cfg.get("verbosity", 0)))


# ---------------------------------------------------------------- simulate


def _scenario_from(cfg, args):
    section = dict(_section(cfg, "scenario"))
    for key in ("beta_y", "beta_r", "beta_c"):
        if key in section:
            section[key] = tuple(section[key])
    if args.reps is not None:
        section["reps"] = args.reps
    if args.seed is not None:
        section["master_seed"] = args.seed
    generated = False
    if "master_seed" not in section:
        section["master_seed"] = int(
            np.random.SeedSequence().generate_state(1, np.uint64)[0])
        generated = True
    scn = _build(SimScenario, section, "scenario",
                 nr_config=_nr_config(cfg), kernel=_kernel_spec(cfg))
    return scn, generated


def cmd_simulate(args):
    cfg = load_config(args.config)
    scn, seed_generated = _scenario_from(cfg, args)
    cells = cfg.get("cells", [scn.beta_c[1]])
    if not isinstance(cells, list) or not cells:
        raise ConfigError("config field 'cells' must be a nonempty list")
    threads = args.threads if args.threads is not None else int(cfg.get("threads", 1))
    out = resolve_out_dir(args.out, cfg)
    verbosity = _verbosity(args, cfg)

    resolved = {
        "command": "simulate",
        "scenario": {
            "N": scn.N, "n_c": scn.n_c, "n_s": scn.n_s,
            "beta_y": list(scn.beta_y), "beta_r": list(scn.beta_r),
            "beta_c": list(scn.beta_c), "reps": scn.reps,
            "master_seed": scn.master_seed,
            "fresh_population": scn.fresh_population,
            "allow_certainty": scn.allow_certainty,
            "pps_flavor": scn.pps_flavor,
        },
        "cells": list(cells),
        "kernel": {"kernel": scn.kernel.kernel,
                   "bandwidth": scn.kernel.bandwidth},
        "nr": {"base_weight_mode": scn.nr_config.base_weight_mode,
               "propensity_floor": scn.nr_config.propensity_floor},
        "threads": threads,
    }
    digest = config_hash(resolved)
    stamp = f"kwnr {__version__} config={digest} master_seed={scn.master_seed}"
    print(("generated " if seed_generated else "") + f"master_seed = {scn.master_seed}")

    progress = None
    if verbosity >= 1:
        step = max(1, scn.reps // 20)

        def progress(done, total):
            if done % step == 0 or done == total:
                print(f"  rep {done}/{total}", file=sys.stderr)

    results = run_study(scn, cells, threads=threads, progress=progress)

    write_table1_csv(os.path.join(out, "table1.csv"), results, comment=stamp)
    write_table2_csv(os.path.join(out, "table2.csv"), results, comment=stamp)
    write_metrics_json(os.path.join(out, "metrics.json"), results,
                       extra={"tool_version": __version__,
                              "config_sha256": digest,
                              "master_seed": scn.master_seed})
    if args.replicates:
        for label, res in results:
            name = "replicates_" + label.replace("=", "_") + ".csv"
            write_replicates_csv(os.path.join(out, name), res.records,
                                 comment=stamp)

    for label, res in results:
        m = res.metrics
        print(f"cell {label}: reps={m.reps_done} failed={m.reps_failed} "
              f"truth={_g4(m.truth_mean)} response={_g4(m.response_rate_mean)}")
        print(f"  {'estimator':<14} {'rb_pct':>9} {'empvar_1e4':>11} {'mse_1e4':>9}")
        for key, em in m.estimators.items():
            print(f"  {key:<14} {_g4(em.rb_pct):>9} "
                  f"{_g4(em.emp_var * 1e4):>11} {_g4(em.mse * 1e4):>9}")
        print(f"  vr={_g4(m.vr)} cv_true={_g4(m.mean_cv_true)} "
              f"cv_kw={_g4(m.mean_cv_kw)} cv_kwnr={_g4(m.mean_cv_kwnr)}")
    print(f"wrote table1.csv, table2.csv, metrics.json to {out}")
    return 0


# ------------------------------------------------------------------ weight


def _ref_schema_from(cfg, header_ref):
    """Reference schema from config, inferring covariates from the header."""
    ref_sec = _section(cfg, "reference_schema")
    weight_col = ref_sec.get("weight", "d")
    covariates = ref_sec.get("covariates") or [
        c for c in header_ref if c != weight_col]
    return _build(ReferenceSchema,
                  {"weight": weight_col, "covariates": covariates},
                  "reference_schema")


def _coh_schema_from(cfg, header_coh, subgroup_flag=None):
    """Cohort schema from config, inferring x from non-reserved columns."""
    coh_sec = _section(cfg, "cohort_schema")
    respond = coh_sec.get("respond", "respond")
    outcome = coh_sec.get("outcome", "y" if "y" in header_coh else None)
    subgroup = subgroup_flag or coh_sec.get("subgroup")
    reserved = {respond, outcome, subgroup, *_WEIGHT_COLUMNS}
    x_cols = coh_sec.get("x") or [c for c in header_coh if c not in reserved]
    z_cols = coh_sec.get("z")
    return _build(CohortSchema,
                  {"respond": respond, "x": x_cols, "z": z_cols,
                   "outcome": outcome, "subgroup": subgroup},
                  "cohort_schema")


def _load_cohort(path, cfg, subgroup_flag=None):
    header, _ = _read_rows(path)
    coh_schema = _coh_schema_from(cfg, header, subgroup_flag=subgroup_flag)
    return load_cohort_csv(path, coh_schema), coh_schema, header


def cmd_weight(args):
    cfg = load_config(args.config)
    out = resolve_out_dir(args.out, cfg)
    verbosity = _verbosity(args, cfg)

    header_ref, _ = _read_rows(args.reference)
    header_coh, rows_coh = _read_rows(args.cohort)
    ref_schema = _ref_schema_from(cfg, header_ref)
    coh_schema = _coh_schema_from(cfg, header_coh)
    reference = load_reference_csv(args.reference, ref_schema)
    cohort = load_cohort_csv(args.cohort, coh_schema)

    design = _design_spec(cfg)
    kernel = _kernel_spec(cfg)
    nr_cfg = _nr_config(cfg)

    pfit = participation_fit(cohort, reference, design)
    b_c = balancing_scores(pfit, design.expand(cohort.x))
    b_s = balancing_scores(pfit, design.expand(reference.x))
    bandwidth = kernel.resolve_bandwidth(np.concatenate([b_c, b_s]))
    kw = kw_pseudoweights(b_c, b_s, reference.d, kernel)
    rfit = fit_response_model(cohort, design.expand(cohort.z), kw, nr_cfg)
    kwnr = kwnr_weights(kw, rfit, cohort)

    resolved = {
        "command": "weight",
        "reference_schema": {"weight": ref_schema.weight,
                             "covariates": list(ref_schema.covariates)},
        "cohort_schema": {"respond": coh_schema.respond,
                          "x": list(coh_schema.x), "z": list(coh_schema.z),
                          "outcome": coh_schema.outcome,
                          "subgroup": coh_schema.subgroup},
        "design": {"interactions": design.interactions,
                   "squares": design.squares},
        "kernel": {"kernel": kernel.kernel, "bandwidth": kernel.bandwidth},
        "nr": {"base_weight_mode": nr_cfg.base_weight_mode,
               "propensity_floor": nr_cfg.propensity_floor},
    }
    digest = config_hash(resolved)
    stamp = f"kwnr {__version__} config={digest}"

    out_csv = os.path.join(out, "cohort_weighted.csv")
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(header_coh + list(_WEIGHT_COLUMNS))
        for i, row in enumerate(rows_coh):
            writer.writerow(row + [fmt17(kw.values[i]),
                                   fmt17(rfit.propensities[i]),
                                   fmt17(kwnr.values[i])])

    mass_ref = float(reference.d.sum())
    mass_kw = kw.sum()
    rel_err = abs(mass_kw - mass_ref) / mass_ref
    summary = {
        "tool_version": __version__,
        "config_sha256": digest,
        "n_reference": reference.n_s,
        "n_cohort": cohort.n_c,
        "n_respondents": cohort.n_r,
        "bandwidth": float(bandwidth),
        "kernel": kernel.kernel,
        "sum_reference_d": mass_ref,
        "sum_kw_weight": mass_kw,
        "mass_rel_err": rel_err,
        "cv_kw": kw.cv,
        "cv_kwnr": kwnr.cv,
        "sum_kwnr_weight": kwnr.sum(),
        "floored_count": rfit.floored_count,
        "participation_fit": _fit_diag(pfit),
        "response_fit": _fit_diag(rfit.fit),
    }
    with open(os.path.join(out, "weights_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"sum(kw_weight) = {_g4(mass_kw)} vs sum(reference d) = "
          f"{_g4(mass_ref)} (rel err {rel_err:.3e})")
    print(f"cv(kw) = {_g4(kw.cv)}, cv(kwnr) = {_g4(kwnr.cv)}, "
          f"floored propensities: {rfit.floored_count}")
    if verbosity >= 1:
        print(f"bandwidth = {_g4(bandwidth)}")
        print(f"participation fit: {pfit.iterations} iterations, "
              f"score norm {pfit.max_score_norm:.3e}")
        print(f"response fit: {rfit.fit.iterations} iterations, "
              f"score norm {rfit.fit.max_score_norm:.3e}")
    print(f"wrote cohort_weighted.csv, weights_summary.json to {out}")
    return 0


def _fit_diag(fit):
    return {
        "coefficients": {lab: float(c) for lab, c in zip(fit.labels,
                                                         fit.coefficients)},
        "iterations": int(fit.iterations),
        "max_score_norm": float(fit.max_score_norm),
        "converged": bool(fit.converged),
    }


# ---------------------------------------------------------------- estimate


def _weights_from_file(path, expected_rows):
    """Read precomputed kw_weight (and optional r_hat) columns."""
    header, rows = _read_rows(path)
    if "kw_weight" not in header:
        raise DataValidationError(
            f"{path}: no 'kw_weight' column; run the weight subcommand "
            "first or point --weights-from at its output"
        )
    if len(rows) != expected_rows:
        raise DataValidationError(
            f"{path}: {len(rows)} rows, cohort file has {expected_rows}"
        )
    k_idx = header.index("kw_weight")
    r_idx = header.index("r_hat") if "r_hat" in header else None
    try:
        kw_vals = np.array([float(row[k_idx]) for row in rows])
        r_vals = (np.array([float(row[r_idx]) for row in rows])
                  if r_idx is not None else None)
    except (ValueError, IndexError) as exc:
        raise DataValidationError(f"{path}: bad weight cell: {exc}") from exc
    return WeightSet(kw_vals, Provenance.KW), r_vals


def cmd_estimate(args):
    cfg = load_config(args.config)
    out = resolve_out_dir(args.out, cfg)

    cohort, coh_schema, header = _load_cohort(args.cohort, cfg,
                                              subgroup_flag=args.subgroup)
    if cohort.y is None:
        raise DataValidationError(
            f"{args.cohort}: no outcome column mapped; set cohort_schema."
            "outcome in the config"
        )
    weights_path = args.weights_from or args.cohort
    kw, r_file = _weights_from_file(weights_path, cohort.n_c)

    design = _design_spec(cfg)
    nr_cfg = _nr_config(cfg)
    rfit = fit_response_model(cohort, design.expand(cohort.z), kw, nr_cfg)
    if r_file is not None:
        drift = float(np.max(np.abs(r_file - rfit.propensities)))
        if drift > 1e-6:
            print(f"warning: refitted propensities differ from stored r_hat "
                  f"by up to {drift:.3e}", file=sys.stderr)

    resolved = {
        "command": "estimate",
        "cohort_schema": {"respond": coh_schema.respond,
                          "x": list(coh_schema.x), "z": list(coh_schema.z),
                          "outcome": coh_schema.outcome,
                          "subgroup": coh_schema.subgroup},
        "design": {"interactions": design.interactions,
                   "squares": design.squares},
        "nr": {"base_weight_mode": nr_cfg.base_weight_mode,
               "propensity_floor": nr_cfg.propensity_floor},
        "weights_from": os.path.basename(weights_path),
    }
    digest = config_hash(resolved)
    stamp = f"kwnr {__version__} config={digest}"

    rows = [("overall", estimate_with_variance(cohort, kw, rfit), "")]
    if coh_schema.subgroup:
        for label in sorted(set(cohort.subgroup)):
            try:
                rep = estimate_subgroup(cohort, kw, rfit, label)
                rows.append((label, rep, rep.variance_reason or ""))
            except DegenerateSubgroupError as exc:
                rows.append((label, None, str(exc)))

    out_csv = os.path.join(out, "estimates.csv")
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {stamp}\n")
        writer = csv.writer(fh)
        writer.writerow(["group", "estimate", "se", "ci_low", "ci_high",
                         "var1", "var2", "n", "n_resp", "reason"])
        for label, rep, reason in rows:
            if rep is None:
                writer.writerow([label] + [""] * 8 + [reason])
                continue
            blank = rep.var_total is None
            writer.writerow([
                label, fmt17(rep.estimate),
                "" if blank else fmt17(rep.se),
                "" if blank else fmt17(rep.ci95[0]),
                "" if blank else fmt17(rep.ci95[1]),
                "" if blank else fmt17(rep.var1),
                "" if blank else fmt17(rep.var2),
                rep.n_used, rep.n_resp, reason,
            ])

    for label, rep, reason in rows:
        if rep is None:
            print(f"{label}: no estimate ({reason})")
        elif rep.var_total is None:
            print(f"{label}: estimate={_g4(rep.estimate)} (no variance: {reason})")
        else:
            print(f"{label}: estimate={_g4(rep.estimate)} se={_g4(rep.se)} "
                  f"ci95=[{_g4(rep.ci95[0])}, {_g4(rep.ci95[1])}] "
                  f"n={rep.n_used} n_resp={rep.n_resp}")
    print(f"wrote estimates.csv to {out}")
    return 0


# -------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kwnr",
        description="Kernel-weighted pseudoweights with nonresponse "
                    "adjustment for nonprobability samples",
    )
    parser.add_argument("--version", action="version",
                        version=f"kwnr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run the Monte Carlo study")
    ps.add_argument("--config", required=True, help="JSON config file")
    ps.add_argument("--reps", type=int, help="override replicate count")
    ps.add_argument("--seed", type=int, help="override master seed")
    ps.add_argument("--threads", type=int, help="worker process count")
    ps.add_argument("--out", help="output directory")
    ps.add_argument("--replicates", action="store_true",
                    help="also write per-replicate CSVs")
    ps.add_argument("-v", "--verbose", action="count", default=0)
    ps.set_defaults(func=cmd_simulate)

    pw = sub.add_parser("weight", help="build pseudoweights for a cohort")
    pw.add_argument("--reference", required=True, help="reference sample CSV")
    pw.add_argument("--cohort", required=True, help="cohort CSV")
    pw.add_argument("--config", help="JSON config file")
    pw.add_argument("--out", help="output directory")
    pw.add_argument("-v", "--verbose", action="count", default=0)
    pw.set_defaults(func=cmd_weight)

    pe = sub.add_parser("estimate",
                        help="estimate adjusted means with variances")
    pe.add_argument("--cohort", required=True, help="cohort CSV")
    pe.add_argument("--weights-from",
                    help="CSV carrying kw_weight (weight subcommand output); "
                         "defaults to the cohort file itself")
    pe.add_argument("--config", help="JSON config file")
    pe.add_argument("--subgroup", help="subgroup column name")
    pe.add_argument("--out", help="output directory")
    pe.add_argument("-v", "--verbose", action="count", default=0)
    pe.set_defaults(func=cmd_estimate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataValidationError, FitError, OrphanReferenceError,
            PpsProbabilityError, SimulationFailureError, ValueError,
            np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
