"""Replicated-simulation study comparing the estimators.

Each replication regenerates the scenario with seed base_seed + k,
fits the requested estimators on the same dataset, and records the
coefficient estimates and sandwich covariances. Aggregation reports
bias, empirical covariance across replications, the average sandwich
covariance, and paired-bootstrap confidence intervals for trace
differences between estimators. Failed replications (non-convergence
or numerical errors) are recorded and excluded from the moments.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .estimators import (
    EstimatorKind,
    fit_chipperfield,
    fit_naive,
    fit_optimal_two_step,
    fit_oracle,
)
from .inference import matrix_to_json
from .linkage_sim import (
    ScenarioConfig,
    analysis_view,
    generate,
    scenario_config_from_dict,
    scenario_config_to_dict,
)
from .match_prob import estimate_match_prob, oracle_table
from .model_core import SolverOptions

__all__ = [
    "MCConfig",
    "EstimatorSummary",
    "PairwiseTrace",
    "MCReport",
    "run_mc",
    "mc_config_from_dict",
    "mc_report_to_dict",
]

TABLE_MODES = ("oracle", "estimated")

BOOTSTRAP_DRAWS = 1000

# Below this many converged replications the empirical covariance is
# flagged as low precision in reports.
LOW_PRECISION_REPS = 30

# Verdict for a pairwise trace difference: the 95% bootstrap interval
# is for trace(second) - trace(first), so positive values favor the
# first estimator. "tie_within_noise" means the interval straddles zero
# but is narrower than TIE_WIDTH_FRACTION of the second trace.
TIE_WIDTH_FRACTION = 0.05


def _cov_matrix(samples: np.ndarray) -> np.ndarray:
    """(p, p) sample covariance of (n, p) rows, also for p = 1."""
    return np.atleast_2d(np.cov(samples.T))


@dataclass(frozen=True)
class MCConfig:
    scenario: ScenarioConfig
    replications: int
    estimators: tuple[EstimatorKind, ...]
    base_seed: int
    table_mode: str = "estimated"
    extra_iterations: int = 0

    def __post_init__(self):
        if self.replications < 2:
            raise ConfigError("replications must be at least 2")
        if not self.estimators:
            raise ConfigError("estimator set must be nonempty")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("duplicate estimators in study")
        if self.table_mode not in TABLE_MODES:
            raise ConfigError(f"table_mode must be one of {TABLE_MODES}")
        if self.extra_iterations < 0:
            raise ConfigError("extra_iterations must be >= 0")


@dataclass
class EstimatorSummary:
    kind: EstimatorKind
    estimates: np.ndarray  # (replications, p), NaN rows for failures
    mean_beta: np.ndarray
    bias: np.ndarray
    empirical_covariance: np.ndarray
    mean_sandwich_covariance: np.ndarray
    trace_empirical: float
    trace_mean_sandwich: float
    n_converged: int
    n_failed: int
    low_precision: bool


@dataclass
class PairwiseTrace:
    first: EstimatorKind
    second: EstimatorKind
    trace_difference: float  # trace(second) - trace(first)
    bootstrap_ci_95: tuple[float, float]
    verdict: str


@dataclass
class MCReport:
    config: MCConfig
    summaries: dict[EstimatorKind, EstimatorSummary]
    pairwise: list[PairwiseTrace]
    replication_seeds: list[int]
    wall_time_seconds: float


def _fit_for_kind(kind, truth, view, table, review_probability, opts, extra_iterations):
    if kind is EstimatorKind.ORACLE:
        return fit_oracle(truth, opts)
    if kind is EstimatorKind.NAIVE:
        return fit_naive(view, opts)
    if kind is EstimatorKind.CHIPPERFIELD:
        return fit_chipperfield(view, table, opts)
    if kind is EstimatorKind.OPTIMAL_TWO_STEP:
        return fit_optimal_two_step(
            view,
            review_probability=review_probability,
            opts=opts,
            table=table,
            extra_iterations=extra_iterations,
        )
    raise ConfigError(f"unknown estimator kind {kind!r}")


def _needs_table(kinds) -> bool:
    return any(
        k in (EstimatorKind.CHIPPERFIELD, EstimatorKind.OPTIMAL_TWO_STEP) for k in kinds
    )


def _paired_bootstrap_trace(first_est, second_est, base_seed):
    """Percentile CI for trace(cov(second)) - trace(cov(first)) by
    resampling replication indices jointly for the pair."""
    ok = np.all(np.isfinite(first_est), axis=1) & np.all(np.isfinite(second_est), axis=1)
    a = first_est[ok]
    b = second_est[ok]
    n = a.shape[0]
    if n < 2:
        return float("nan"), (float("nan"), float("nan"))
    point = float(np.trace(_cov_matrix(b)) - np.trace(_cov_matrix(a)))
    rng = np.random.Generator(np.random.Philox(key=(base_seed ^ 0x5EEDB00) & ((1 << 64) - 1)))
    diffs = np.empty(BOOTSTRAP_DRAWS)
    for t in range(BOOTSTRAP_DRAWS):
        idx = rng.integers(0, n, size=n)
        diffs[t] = np.trace(_cov_matrix(b[idx])) - np.trace(_cov_matrix(a[idx]))
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    return point, (float(lo), float(hi))


def run_mc(config: MCConfig, opts: SolverOptions | None = None) -> MCReport:
    """Run the full study; deterministic given the config."""
    start = time.perf_counter()
    scenario = config.scenario
    p = scenario.p
    reps = config.replications
    kinds = config.estimators

    estimates = {k: np.full((reps, p), np.nan) for k in kinds}
    sand_sum = {k: np.zeros((p, p)) for k in kinds}
    sand_count = {k: 0 for k in kinds}
    failures = {k: 0 for k in kinds}
    seeds = []

    for k in range(reps):
        rep_seed = config.base_seed + k
        seeds.append(rep_seed)
        rep_scenario = ScenarioConfig(
            n=scenario.n,
            beta_true=scenario.beta_true,
            covariate_levels=scenario.covariate_levels,
            match_model=scenario.match_model,
            mismatch_response_model=scenario.mismatch_response_model,
            review_probability=scenario.review_probability,
            seed=rep_seed,
        )
        truth = generate(rep_scenario)
        view = analysis_view(truth)
        table = None
        table_failed = False
        if _needs_table(kinds):
            try:
                if config.table_mode == "oracle":
                    table = oracle_table(rep_scenario)
                else:
                    table = estimate_match_prob(view)
            except NumericalError:
                table_failed = True
        for kind in kinds:
            needs_table = kind in (EstimatorKind.CHIPPERFIELD, EstimatorKind.OPTIMAL_TWO_STEP)
            if table_failed and needs_table:
                failures[kind] += 1
                continue
            try:
                fit = _fit_for_kind(
                    kind,
                    truth,
                    view,
                    table,
                    scenario.review_probability,
                    opts,
                    config.extra_iterations,
                )
            except NumericalError:
                failures[kind] += 1
                continue
            if not fit.converged:
                failures[kind] += 1
                continue
            estimates[kind][k] = fit.beta
            if fit.covariance is not None:
                sand_sum[kind] += fit.covariance
                sand_count[kind] += 1

    beta_true = np.asarray(scenario.beta_true, dtype=float)
    summaries = {}
    for kind in kinds:
        est = estimates[kind]
        ok = np.all(np.isfinite(est), axis=1)
        good = est[ok]
        n_ok = good.shape[0]
        if n_ok >= 2:
            mean_beta = good.mean(axis=0)
            emp_cov = _cov_matrix(good)
        elif n_ok == 1:
            mean_beta = good[0]
            emp_cov = np.full((p, p), np.nan)
        else:
            mean_beta = np.full(p, np.nan)
            emp_cov = np.full((p, p), np.nan)
        mean_sand = (
            sand_sum[kind] / sand_count[kind]
            if sand_count[kind] > 0
            else np.full((p, p), np.nan)
        )
        summaries[kind] = EstimatorSummary(
            kind=kind,
            estimates=est,
            mean_beta=mean_beta,
            bias=mean_beta - beta_true,
            empirical_covariance=emp_cov,
            mean_sandwich_covariance=mean_sand,
            trace_empirical=float(np.trace(emp_cov)),
            trace_mean_sandwich=float(np.trace(mean_sand)),
            n_converged=n_ok,
            n_failed=failures[kind],
            low_precision=n_ok < LOW_PRECISION_REPS,
        )

    pairwise = []
    for i, first in enumerate(kinds):
        for second in kinds[i + 1 :]:
            point, ci = _paired_bootstrap_trace(
                estimates[first], estimates[second], config.base_seed
            )
            trace_second = summaries[second].trace_empirical
            if np.isnan(point):
                verdict = "inconclusive"
            elif ci[0] > 0.0:
                verdict = "first_better"
            elif ci[1] < 0.0:
                verdict = "second_better"
            elif np.isfinite(trace_second) and (ci[1] - ci[0]) < TIE_WIDTH_FRACTION * abs(
                trace_second
            ):
                verdict = "tie_within_noise"
            else:
                verdict = "inconclusive"
            pairwise.append(
                PairwiseTrace(
                    first=first,
                    second=second,
                    trace_difference=point,
                    bootstrap_ci_95=ci,
                    verdict=verdict,
                )
            )

    return MCReport(
        config=config,
        summaries=summaries,
        pairwise=pairwise,
        replication_seeds=seeds,
        wall_time_seconds=time.perf_counter() - start,
    )


def mc_config_from_dict(doc: dict) -> MCConfig:
    """Build an MCConfig from the documented JSON layout."""
    if not isinstance(doc, dict):
        raise ConfigError("MC config must be a JSON object")
    for key in ("scenario", "replications", "estimators", "base_seed"):
        if key not in doc:
            raise ConfigError(f"MC config is missing required key {key!r}")
    try:
        kinds = tuple(EstimatorKind(name) for name in doc["estimators"])
    except ValueError as exc:
        raise ConfigError(str(exc))
    return MCConfig(
        scenario=scenario_config_from_dict(doc["scenario"]),
        replications=int(doc["replications"]),
        estimators=kinds,
        base_seed=int(doc["base_seed"]),
        table_mode=doc.get("table_mode", "estimated"),
        extra_iterations=int(doc.get("extra_iterations", 0)),
    )


def mc_report_to_dict(report: MCReport) -> dict:
    """JSON document for the study; deterministic except for
    wall_time_seconds."""
    est_docs = {}
    for kind, s in report.summaries.items():
        est_docs[kind.value] = {
            "mean_beta": [float(v) for v in s.mean_beta],
            "bias": [float(v) for v in s.bias],
            "empirical_covariance": matrix_to_json(s.empirical_covariance),
            "mean_sandwich_covariance": matrix_to_json(s.mean_sandwich_covariance),
            "trace_empirical": s.trace_empirical,
            "trace_mean_sandwich": s.trace_mean_sandwich,
            "n_converged": s.n_converged,
            "n_failed": s.n_failed,
            "low_precision": s.low_precision,
        }
    return {
        "scenario": scenario_config_to_dict(report.config.scenario),
        "replications": report.config.replications,
        "estimators": [k.value for k in report.config.estimators],
        "base_seed": report.config.base_seed,
        "table_mode": report.config.table_mode,
        "extra_iterations": report.config.extra_iterations,
        "beta_true": list(report.config.scenario.beta_true),
        "results": est_docs,
        "pairwise_trace": [
            {
                "first": pw.first.value,
                "second": pw.second.value,
                "trace_difference": pw.trace_difference,
                "bootstrap_ci_95": list(pw.bootstrap_ci_95),
                "verdict": pw.verdict,
            }
            for pw in report.pairwise
        ],
        "replication_seeds": report.replication_seeds,
        "wall_time_seconds": report.wall_time_seconds,
    }
