"""Command-line harness.

Subcommands: ``simulate`` writes a dataset CSV from a scenario config,
``fit`` runs one estimator on a dataset CSV and writes a JSON result,
``mc`` runs a replicated comparison study, and ``score-audit`` measures
the score-identity gap. Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 IO or parse error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .errors import ConfigError, LinkregError, NumericalError, ParseError
from .estimators import (
    EstimatorKind,
    fit_chipperfield,
    fit_naive,
    fit_optimal_two_step,
    fit_oracle,
)
from .inference import gap_report_to_dict, matrix_to_json, score_identity_audit
from .linkage_sim import (
    analysis_view,
    generate,
    load_scenario_config,
    read_dataset_csv,
    write_dataset_csv,
)
from .match_prob import estimate_match_prob, oracle_table
from .montecarlo import mc_config_from_dict, mc_report_to_dict, run_mc
from .report import render_figures, write_estimates_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def cmd_simulate(args) -> int:
    config = load_scenario_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    ds = generate(config)
    write_dataset_csv(ds, args.out)
    _say(args, f"wrote {len(ds)} records to {args.out} (seed {config.seed})")
    return EXIT_OK


def _load_table(args, view):
    if args.table == "oracle":
        if args.config is None:
            raise ConfigError("--table oracle requires --config with the generating scenario")
        return oracle_table(load_scenario_config(args.config))
    return estimate_match_prob(view)


def cmd_fit(args) -> int:
    ds = read_dataset_csv(args.data)
    view = analysis_view(ds)
    kind = EstimatorKind(args.estimator)

    table = None
    if kind is EstimatorKind.ORACLE:
        if not ds.has_ground_truth:
            raise ConfigError("oracle estimator requires ground-truth columns d and y_latent")
        fit = fit_oracle(ds)
    elif kind is EstimatorKind.NAIVE:
        fit = fit_naive(view)
    elif kind is EstimatorKind.CHIPPERFIELD:
        table = _load_table(args, view)
        fit = fit_chipperfield(view, table)
    else:
        table = _load_table(args, view)
        review_probability = None
        if args.config is not None:
            review_probability = load_scenario_config(args.config).review_probability
        fit = fit_optimal_two_step(
            view,
            review_probability=review_probability,
            table=table,
            extra_iterations=args.extra_iterations,
        )

    doc = {
        "estimator": kind.value,
        "table_mode": args.table if table is not None else None,
        "n_records": len(ds),
        "n_reviewed": int(np.sum(ds.r == 1)),
        "beta": [float(v) for v in fit.beta],
        "converged": fit.converged,
        "iterations": fit.iterations,
        "final_score_norm": fit.final_score_norm,
        "covariance": matrix_to_json(fit.covariance),
        "match_prob_provenance": table.provenance_counts() if table is not None else None,
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    _say(args, f"{kind.value}: beta = {[round(float(v), 6) for v in fit.beta]}")
    if not fit.converged:
        _say(args, "warning: solver did not converge")
    return EXIT_OK


def cmd_mc(args) -> int:
    with open(args.config) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: invalid JSON: {exc.msg}")
    config = mc_config_from_dict(doc)
    if args.seed is not None:
        config = dataclasses.replace(config, base_seed=args.seed)
    if args.reps is not None:
        config = dataclasses.replace(config, replications=args.reps)

    report = run_mc(config)
    with open(args.out, "w") as fh:
        json.dump(mc_report_to_dict(report), fh, indent=2)
        fh.write("\n")
    if args.emit_plot_data is not None:
        write_estimates_csv(report, args.emit_plot_data)
        figures = render_figures(report, args.emit_plot_data)
        _say(args, f"plot data: {args.emit_plot_data}")
        for path in figures:
            _say(args, f"figure: {path}")
    for kind, s in report.summaries.items():
        _say(
            args,
            f"{kind.value}: bias {[round(float(v), 5) for v in s.bias]}, "
            f"trace {s.trace_empirical:.6g}, converged {s.n_converged}/{config.replications}",
        )
    for pw in report.pairwise:
        _say(
            args,
            f"trace({pw.second.value}) - trace({pw.first.value}) = "
            f"{pw.trace_difference:.3e}, 95% CI {pw.bootstrap_ci_95}, verdict {pw.verdict}",
        )
    return EXIT_OK


def cmd_score_audit(args) -> int:
    config = load_scenario_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    beta = None
    if args.beta is not None:
        try:
            beta = [float(v) for v in args.beta.split(",")]
        except ValueError:
            raise ConfigError(f"--beta must be comma-separated numbers, got {args.beta!r}")
    report = score_identity_audit(config, beta=beta, n_mc=args.n_mc)
    with open(args.out, "w") as fh:
        json.dump(gap_report_to_dict(report), fh, indent=2)
        fh.write("\n")
    _say(
        args,
        f"gap min eigenvalue {report.min_eigenvalue:.6g} over {report.n_mc} records "
        f"(seed {report.seed})",
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linkreg",
        description="Logistic regression on linked records with false-positive links",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a dataset CSV from a scenario config")
    sim.add_argument("--config", required=True, help="scenario config JSON")
    sim.add_argument("--out", required=True, help="output dataset CSV")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit one estimator on a dataset CSV")
    fit.add_argument("--data", required=True, help="dataset CSV")
    fit.add_argument(
        "--estimator",
        required=True,
        choices=[k.value for k in EstimatorKind],
    )
    fit.add_argument("--table", choices=["oracle", "estimated"], default="estimated")
    fit.add_argument("--config", default=None, help="scenario config JSON (oracle table)")
    fit.add_argument("--extra-iterations", type=int, default=0)
    fit.add_argument("--out", required=True, help="output JSON")
    fit.set_defaults(func=cmd_fit)

    mc = sub.add_parser("mc", help="run a replicated estimator comparison")
    mc.add_argument("--config", required=True, help="MC config JSON")
    mc.add_argument("--out", required=True, help="output report JSON")
    mc.add_argument("--seed", type=int, default=None, help="override base_seed")
    mc.add_argument("--reps", type=int, default=None, help="override replications")
    mc.add_argument(
        "--emit-plot-data",
        default=None,
        metavar="CSV",
        help="also write per-replication estimates as CSV with figures alongside",
    )
    mc.set_defaults(func=cmd_mc)

    audit = sub.add_parser("score-audit", help="measure the score-identity gap")
    audit.add_argument("--config", required=True, help="scenario config JSON")
    audit.add_argument("--beta", default=None, help="comma-separated coefficients (default: true)")
    audit.add_argument("--n-mc", type=int, default=1_000_000)
    audit.add_argument("--seed", type=int, default=None, help="override the config seed")
    audit.add_argument("--out", required=True, help="output JSON")
    audit.set_defaults(func=cmd_score_audit)

    for sp in (sim, fit, mc, audit):
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LinkregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
