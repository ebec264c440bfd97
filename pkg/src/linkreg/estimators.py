"""The four fitting procedures for linked-data logistic regression.

All of them solve an estimating equation of the form

    sum_i c_i x_i w_i (y_i - mu_i(beta)) = 0

by Newton-Raphson, differing in which response they use and in the
per-record multipliers:

* oracle:      y = latent response, c = w = 1 (classical score;
               requires ground truth, simulation only);
* naive:       y = observed response, c = w = 1 (biased baseline);
* chipperfield: y = observed response, w = d on reviewed links and
               the estimated match probability elsewhere;
* optimal two-step: same residual weights w, additionally rescaled by
               a per-level factor chosen to maximize the estimating
               function's information; the factor is computed from a
               first-step chipperfield fit and frozen while the second
               step is solved.

Every fit attaches a sandwich covariance evaluated at its own root.
"""
from __future__ import annotations

import enum
from dataclasses import replace

import numpy as np

from .errors import DataError, DegenerateCellError
from .inference import sandwich
from .linkage_sim import LinkedDataset, LinkedRecord, covkey, level_index
from .match_prob import (
    MatchProbTable,
    ResidualMomentTable,
    estimate_match_prob,
    estimate_residual_moment,
    row_match_probs,
)
from .model_core import (
    FitResult,
    SolverOptions,
    classical_score,
    classical_score_jacobian,
    mu,
    newton_solve,
)

__all__ = [
    "EstimatorKind",
    "h_value",
    "h_values",
    "optimal_weight",
    "fit_oracle",
    "fit_naive",
    "fit_chipperfield",
    "fit_optimal_two_step",
]


class EstimatorKind(enum.Enum):
    """Estimator selector; values double as CLI tokens."""

    ORACLE = "oracle"
    NAIVE = "naive"
    CHIPPERFIELD = "chipperfield"
    OPTIMAL_TWO_STEP = "optimal"


def _init_beta(p: int, init) -> np.ndarray:
    if init is None:
        return np.zeros(p)
    init = np.asarray(init, dtype=float)
    if init.shape != (p,):
        raise ValueError(f"init must have shape ({p},)")
    return init


def _attach_sandwich(fit: FitResult, x, resid_weights, response) -> FitResult:
    """Sandwich covariance for an equation sum_i a_i x_i (y_i - mu_i),
    with per-record multipliers ``a_i`` that do not depend on beta."""
    m = mu(fit.beta, x)
    g_rows = x * (resid_weights * (response - m))[:, None]
    bread = -(x * (resid_weights * m * (1.0 - m))[:, None]).T @ x / x.shape[0]
    est = sandwich(g_rows, bread)
    return replace(fit, covariance=est.covariance)


def _solve_weighted(x, y, resid_weights, opts, init) -> FitResult:
    beta0 = _init_beta(x.shape[1], init)
    fit = newton_solve(
        lambda b: classical_score(x, y, b, weights=resid_weights),
        lambda b: classical_score_jacobian(x, b, weights=resid_weights),
        beta0,
        opts,
    )
    if not fit.converged:
        return fit  # no covariance at a non-root
    return _attach_sandwich(fit, x, resid_weights, np.asarray(y, dtype=float))


def fit_oracle(ds: LinkedDataset, opts: SolverOptions | None = None, init=None) -> FitResult:
    """Classical logistic fit on the latent responses (ground truth)."""
    if not np.all(np.isfinite(ds.y_latent)):
        raise DataError("oracle fit requires the latent response on every record")
    return _solve_weighted(ds.x, ds.y_latent, np.ones(len(ds)), opts, init)


def fit_naive(ds: LinkedDataset, opts: SolverOptions | None = None, init=None) -> FitResult:
    """Classical logistic fit pretending the observed responses are
    correct; biased whenever false positives exist."""
    return _solve_weighted(ds.x, np.asarray(ds.y_star, float), np.ones(len(ds)), opts, init)


def h_value(record: LinkedRecord, table: MatchProbTable, beta) -> float:
    """Per-record base estimating value
    {r d + (1-r) p_hat(x, y*)} (y* - mu(beta, x)).

    Reviewed records use the clerical decision and ignore the table.
    """
    if record.r == 1:
        if record.d is None:
            raise DataError("reviewed record without a match decision")
        w = float(record.d)
    else:
        w = table.p_hat(record.x, record.y_star)
    return w * (record.y_star - mu(np.asarray(beta, float), record.x))


def h_values(ds: LinkedDataset, table: MatchProbTable, beta) -> np.ndarray:
    """Vectorized :func:`h_value` over a whole dataset."""
    w = _residual_weights(ds, table)
    return w * (np.asarray(ds.y_star, float) - mu(np.asarray(beta, float), ds.x))


def _residual_weights(ds: LinkedDataset, table: MatchProbTable) -> np.ndarray:
    """Vectorized weight r d + (1-r) p_hat for every record."""
    reviewed = ds.r == 1
    if np.any(reviewed & ~np.isfinite(ds.d)):
        raise DataError("reviewed record without a match decision")
    p_hat = row_match_probs(ds, table)
    return np.where(reviewed, ds.d, p_hat)


def fit_chipperfield(
    ds: LinkedDataset,
    table: MatchProbTable,
    opts: SolverOptions | None = None,
    init=None,
) -> FitResult:
    """Estimating-equation fit with match-probability weights.

    Solves sum_i x_i {r_i d_i + (1-r_i) p_hat_i} (y*_i - mu_i) = 0 in a
    single Newton loop; the weights do not involve beta, so no nested
    iteration is needed.
    """
    w = _residual_weights(ds, table)
    return _solve_weighted(ds.x, np.asarray(ds.y_star, float), w, opts, init)


def _scale_for_level(
    key,
    table: MatchProbTable,
    moments: ResidualMomentTable,
    review_probability: float,
    beta,
) -> float:
    """Optimal rescaling factor for one covariate level,

        s(x) = v(x) P(D=1|x) / [p v(x) P(D=1|x) + (1-p) m(x)]

    with v(x) = mu(1-mu) at the supplied beta and m(x) the residual
    moment."""
    beta = np.asarray(beta, dtype=float)
    m = mu(beta, np.asarray(key))
    num = m * (1.0 - m) * table.marginal_match_prob(key)
    p = float(review_probability)
    den = p * num + (1.0 - p) * moments.m_hat(key)
    if den <= 1e-12:
        raise DegenerateCellError(
            f"optimal weight denominator is {den:.3e} at covariate level {key}; "
            f"P(D=1|X) is effectively 0 with review probability {p}"
        )
    return num / den


def _level_scales(
    ds: LinkedDataset,
    table: MatchProbTable,
    moments: ResidualMomentTable,
    review_probability: float,
    beta,
):
    """Per-level scale factors for a whole dataset; returns
    (keys, per-row level index, per-level scale array)."""
    keys, lidx = level_index(ds.x)
    scales = np.array(
        [_scale_for_level(key, table, moments, review_probability, beta) for key in keys]
    )
    return keys, lidx, scales


def optimal_weight(
    record: LinkedRecord,
    table: MatchProbTable,
    moments: ResidualMomentTable,
    review_probability: float,
    beta,
) -> np.ndarray:
    """Optimal multiplier vector for one record: -x times its level's
    scale factor (see :func:`_scale_for_level`)."""
    scale = _scale_for_level(covkey(record.x), table, moments, review_probability, beta)
    return -np.asarray(record.x, dtype=float) * scale


def fit_optimal_two_step(
    ds: LinkedDataset,
    review_probability: float | None = None,
    opts: SolverOptions | None = None,
    table: MatchProbTable | None = None,
    moments: ResidualMomentTable | None = None,
    extra_iterations: int = 0,
    init=None,
) -> FitResult:
    """Two-step estimator with information-optimal per-level weights.

    Step 0 estimates the match-probability table from the clerical
    sample (unless one is supplied). Step 1 runs the chipperfield fit.
    Step 1b estimates the per-level residual moments at the first-step
    coefficients. Step 2 re-solves the equation with every record's
    contribution rescaled by its level's optimal factor; the factors
    stay frozen at the first-step coefficients while Newton iterates
    (only mu inside the residual moves). ``extra_iterations`` optionally
    re-freezes the factors at the newest root and re-solves.

    ``review_probability`` defaults to the observed share of reviewed
    records.
    """
    if review_probability is None:
        review_probability = float(np.mean(ds.r == 1))
    if not (0.0 < review_probability <= 1.0):
        raise ValueError("review_probability must be in (0, 1]")
    if extra_iterations < 0:
        raise ValueError("extra_iterations must be >= 0")

    if table is None:
        table = estimate_match_prob(ds)
    w = _residual_weights(ds, table)
    y = np.asarray(ds.y_star, dtype=float)

    first = fit_chipperfield(ds, table, opts, init)
    if not first.converged:
        return first  # no sound point to freeze the weights at
    beta_ref = first.beta
    fit = first
    step_moments = moments
    for _ in range(extra_iterations + 1):
        if step_moments is None:
            step_moments = estimate_residual_moment(ds, table, beta_ref)
        _, lidx, scales = _level_scales(ds, table, step_moments, review_probability, beta_ref)
        a = scales[lidx] * w
        fit = _solve_weighted(ds.x, y, a, opts, beta_ref)
        beta_ref = fit.beta
        step_moments = None  # extra passes re-estimate at the refreshed root
    return fit
