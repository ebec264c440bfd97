from __future__ import annotations

import numpy as np
import pytest

from linkreg import (
    DataError,
    DegenerateCellError,
    LinkedDataset,
    LinkedRecord,
    SingularJacobianError,
    analysis_view,
    estimate_match_prob,
    fit_chipperfield,
    fit_naive,
    fit_optimal_two_step,
    fit_oracle,
    generate,
    h_value,
    mu,
    optimal_weight,
    oracle_table,
    true_y_star_rate,
)
from linkreg.estimators import h_values
from linkreg.linkage_sim import CovariateLevel, ScenarioConfig, covkey
from linkreg.match_prob import CellEstimate, MatchProbTable, MomentCell, ResidualMomentTable
from conftest import standard_scenario
from oracles import asymptotic_trace_pair, saturated_population_logit


def single_cell_table(p_hat, key=(1.0,), marginal=None):
    cells = {
        (covkey(key), y): CellEstimate(
            p_hat=p_hat, n_matched=0, n_unmatched=0, n_rows=1, provenance="cell"
        )
        for y in (0, 1)
    }
    marg = {covkey(key): marginal} if marginal is not None else None
    return MatchProbTable(cells=cells, marginal=marg)


def spread_scenario(**overrides):
    """Four levels with heterogeneous match rates and a sparse clerical
    sample: the setting where the optimal rescaling actually moves."""
    levels = [(1.0, -1.5), (1.0, -0.5), (1.0, 0.5), (1.0, 1.5)]
    lams = [0.98, 0.9, 0.55, 0.45]
    params = dict(
        n=10_000,
        beta_true=(-1.0, 1.5),
        covariate_levels=tuple(CovariateLevel(covkey(v), 0.25) for v in levels),
        match_model={covkey(v): l for v, l in zip(levels, lams)},
        mismatch_response_model="population-marginal",
        review_probability=0.1,
        seed=424242,
    )
    params.update(overrides)
    return ScenarioConfig(**params)


class TestHValue:
    def test_reviewed_unmatched_is_zero(self):
        rec = LinkedRecord(x=np.array([1.0]), y_star=1, r=1, d=0, y_latent=None)
        table = single_cell_table(0.9)
        assert h_value(rec, table, [2.5]) == 0.0

    def test_reviewed_matched(self):
        # mu = 0.25 via intercept -log 3
        rec = LinkedRecord(x=np.array([1.0]), y_star=1, r=1, d=1, y_latent=None)
        table = single_cell_table(0.1)  # ignored for reviewed records
        assert h_value(rec, table, [-np.log(3.0)]) == pytest.approx(0.75, abs=1e-15)

    def test_unreviewed_uses_table(self):
        rec = LinkedRecord(x=np.array([1.0]), y_star=0, r=0, d=None, y_latent=None)
        table = single_cell_table(0.8)
        assert h_value(rec, table, [0.0]) == pytest.approx(-0.4, abs=1e-15)

    def test_reviewed_without_decision(self):
        rec = LinkedRecord(x=np.array([1.0]), y_star=1, r=1, d=None, y_latent=None)
        with pytest.raises(DataError, match="match decision"):
            h_value(rec, single_cell_table(0.5), [0.0])

    def test_bounded_by_one(self, rng):
        table = single_cell_table(1.0)
        for _ in range(200):
            rec = LinkedRecord(
                x=np.array([1.0]),
                y_star=int(rng.integers(0, 2)),
                r=int(rng.integers(0, 2)),
                d=int(rng.integers(0, 2)),
                y_latent=None,
            )
            assert abs(h_value(rec, table, [rng.normal() * 5])) <= 1.0

    def test_vectorized_matches_scalar(self):
        view = analysis_view(generate(standard_scenario(n=300)))
        table = estimate_match_prob(view)
        beta = np.array([-0.2, 0.4])
        hv = h_values(view, table, beta)
        for i in range(0, 300, 37):
            assert hv[i] == pytest.approx(h_value(view.record(i), table, beta), abs=1e-15)


class TestOracleAndNaive:
    def test_intercept_only_closed_form(self):
        cfg = ScenarioConfig(
            n=5000,
            beta_true=(0.4,),
            covariate_levels=(CovariateLevel((1.0,), 1.0),),
            match_model=0.8,
            review_probability=0.5,
            seed=11,
        )
        ds = generate(cfg)
        fit = fit_oracle(ds)
        rate = ds.y_latent.mean()
        assert fit.beta[0] == pytest.approx(np.log(rate / (1 - rate)), abs=1e-10)
        naive = fit_naive(analysis_view(ds))
        rate_star = ds.y_star.mean()
        assert naive.beta[0] == pytest.approx(np.log(rate_star / (1 - rate_star)), abs=1e-10)

    def test_oracle_requires_ground_truth(self):
        view = analysis_view(generate(standard_scenario(n=100)))
        with pytest.raises(DataError, match="latent"):
            fit_oracle(view)

    def test_perfect_linkage_naive_equals_oracle(self):
        ds = generate(standard_scenario(n=4000, match_model=1.0))
        view = analysis_view(ds)
        assert np.array_equal(fit_oracle(ds).beta, fit_naive(view).beta)

    def test_oracle_consistency_large_sample(self):
        cfg = standard_scenario(n=100_000, seed=61)
        fit = fit_oracle(generate(cfg))
        se = np.sqrt(np.diag(fit.covariance))
        assert np.all(np.abs(fit.beta - cfg.beta_true) <= 3 * se)

    def test_naive_slope_attenuated(self):
        cfg = standard_scenario(n=100_000, seed=62)
        fit = fit_naive(analysis_view(generate(cfg)))
        se = np.sqrt(fit.covariance[1, 1])
        assert abs(fit.beta[1]) < 1.0 - 3 * se
        # and the fitted slope agrees with the enumerated population root
        rates = [true_y_star_rate(cfg, key) for key in cfg.level_keys()]
        pop = saturated_population_logit(cfg.level_matrix(), rates)
        assert abs(fit.beta[1] - pop[1]) <= 3 * se

    def test_oracle_matches_bisection(self):
        cfg = standard_scenario(n=3000, seed=63)
        ds = generate(cfg)
        from oracles import bisect_logistic_mle

        assert np.max(np.abs(fit_oracle(ds).beta - bisect_logistic_mle(ds.x[:, 1], ds.y_latent))) < 1e-8


class TestChipperfield:
    def test_full_review_is_matched_subset_mle(self):
        cfg = standard_scenario(n=5000, review_probability=1.0, seed=21)
        ds = generate(cfg)
        view = analysis_view(ds)
        fit = fit_chipperfield(view, estimate_match_prob(view))
        matched = ds.d == 1
        sub = LinkedDataset(
            x=ds.x[matched],
            y_star=ds.y_star[matched],
            r=ds.r[matched],
            d=ds.d[matched],
            y_latent=ds.y_star[matched].astype(float),
        )
        mle = fit_oracle(sub)  # y* = y on matched links
        assert np.max(np.abs(fit.beta - mle.beta)) < 1e-8

    def test_perfect_linkage_equals_oracle(self):
        cfg = standard_scenario(n=5000, match_model=1.0, seed=22)
        ds = generate(cfg)
        view = analysis_view(ds)
        for table in (oracle_table(cfg), estimate_match_prob(view)):
            fit = fit_chipperfield(view, table)
            assert np.array_equal(fit.beta, fit_oracle(ds).beta)

    def test_consistency_with_oracle_table(self):
        cfg = standard_scenario(n=100_000, seed=23)
        view = analysis_view(generate(cfg))
        fit = fit_chipperfield(view, oracle_table(cfg))
        se = np.sqrt(np.diag(fit.covariance))
        assert np.all(np.abs(fit.beta - cfg.beta_true) <= 3 * se)

    def test_all_zero_weights_is_singular(self):
        rows = 20
        ds = LinkedDataset(
            x=np.ones((rows, 1)),
            y_star=np.array([0, 1] * 10, dtype=np.int8),
            r=np.array([1, 0] * 10, dtype=np.int8),
            d=np.array([0.0, np.nan] * 10),
            y_latent=np.full(rows, np.nan),
        )
        table = single_cell_table(0.0)
        with pytest.raises(SingularJacobianError):
            fit_chipperfield(ds, table)

    def test_constant_table_scale_cancels_without_reviews(self):
        # on an unreviewed dataset the weights multiply the classical
        # equation by a constant, so the root cannot depend on it
        cfg = standard_scenario(n=4000, review_probability=0.0, seed=24)
        view = analysis_view(generate(cfg))
        roots = []
        for c in (0.25, 0.6, 1.0):
            cells = {
                (key, y): CellEstimate(c, 0, 0, 1, "cell")
                for key in cfg.level_keys()
                for y in (0, 1)
            }
            fit = fit_chipperfield(view, MatchProbTable(cells=cells))
            roots.append(fit.beta)
        assert np.max(np.abs(roots[0] - roots[1])) < 1e-8
        assert np.max(np.abs(roots[1] - roots[2])) < 1e-8

    def test_permutation_invariance(self, rng):
        cfg = standard_scenario(n=3000, seed=25)
        view = analysis_view(generate(cfg))
        table = estimate_match_prob(view)
        perm = rng.permutation(len(view))
        shuffled = LinkedDataset(
            x=view.x[perm],
            y_star=view.y_star[perm],
            r=view.r[perm],
            d=view.d[perm],
            y_latent=view.y_latent[perm],
        )
        a = fit_chipperfield(view, table)
        b = fit_chipperfield(shuffled, table)
        assert np.max(np.abs(a.beta - b.beta)) < 1e-8


class TestOptimalWeight:
    def test_full_review_cancels_exactly(self):
        table = single_cell_table(0.6, marginal=0.6)
        moments = ResidualMomentTable({covkey((1.0,)): MomentCell(0.123, 10)})
        rec = LinkedRecord(x=np.array([1.0]), y_star=1, r=0, d=None, y_latent=None)
        w = optimal_weight(rec, table, moments, review_probability=1.0, beta=[0.7])
        assert np.array_equal(w, -rec.x)

    def test_no_false_positives_cancel_exactly(self):
        # p_hat = 1 with the residual moment equal to mu(1-mu)
        beta = [0.3]
        m = mu(beta, np.array([1.0]))
        table = single_cell_table(1.0, marginal=1.0)
        moments = ResidualMomentTable({covkey((1.0,)): MomentCell(m * (1 - m), 10)})
        rec = LinkedRecord(x=np.array([1.0]), y_star=0, r=0, d=None, y_latent=None)
        w = optimal_weight(rec, table, moments, review_probability=0.4, beta=beta)
        assert np.array_equal(w, -rec.x)

    def test_hand_computed_scale(self):
        # lam .8, mu .5, review .5, moment .16 -> scale 0.2/0.18
        table = single_cell_table(0.8, marginal=0.8)
        moments = ResidualMomentTable({covkey((1.0,)): MomentCell(0.16, 10)})
        rec = LinkedRecord(x=np.array([1.0]), y_star=1, r=0, d=None, y_latent=None)
        w = optimal_weight(rec, table, moments, review_probability=0.5, beta=[0.0])
        assert w[0] == pytest.approx(-0.2 / 0.18, abs=1e-15)

    def test_moment_for_hand_case_comes_from_enumeration(self):
        # the 0.16 above is the exact moment when q equals the mean:
        # every cell's match probability is lam, so the moment is
        # lam^2 E[(y*-mu)^2] = 0.64 * 0.25
        from linkreg import true_residual_moment

        cfg = ScenarioConfig(
            n=10,
            beta_true=(0.0,),
            covariate_levels=(CovariateLevel((1.0,), 1.0),),
            match_model=0.8,
            mismatch_response_model=0.5,
            review_probability=0.5,
            seed=0,
        )
        assert true_residual_moment(cfg, (1.0,), (0.0,)) == pytest.approx(0.16, abs=1e-15)

    def test_degenerate_denominator(self):
        table = single_cell_table(0.0)
        moments = ResidualMomentTable({covkey((1.0,)): MomentCell(0.0, 10)})
        rec = LinkedRecord(x=np.array([1.0]), y_star=1, r=0, d=None, y_latent=None)
        with pytest.raises(DegenerateCellError, match=r"\(1\.0,\)"):
            optimal_weight(rec, table, moments, review_probability=0.5, beta=[0.0])


class TestOptimalTwoStep:
    def test_full_review_equals_chipperfield(self):
        cfg = standard_scenario(n=5000, review_probability=1.0, seed=31)
        view = analysis_view(generate(cfg))
        table = estimate_match_prob(view)
        chip = fit_chipperfield(view, table)
        opt = fit_optimal_two_step(view, review_probability=1.0, table=table)
        assert np.max(np.abs(chip.beta - opt.beta)) < 1e-8

    def test_perfect_linkage_equals_oracle(self):
        cfg = standard_scenario(n=5000, match_model=1.0, seed=32)
        ds = generate(cfg)
        view = analysis_view(ds)
        opt = fit_optimal_two_step(view, review_probability=0.5, table=oracle_table(cfg))
        assert np.max(np.abs(opt.beta - fit_oracle(ds).beta)) < 1e-8

    def test_review_probability_defaults_to_observed_share(self):
        cfg = standard_scenario(n=5000, seed=33)
        view = analysis_view(generate(cfg))
        explicit = fit_optimal_two_step(view, review_probability=float(np.mean(view.r == 1)))
        default = fit_optimal_two_step(view)
        assert np.array_equal(explicit.beta, default.beta)

    def test_extra_iterations_refreeze(self):
        cfg = spread_scenario(n=5000, seed=34)
        view = analysis_view(generate(cfg))
        table = oracle_table(cfg)
        base = fit_optimal_two_step(view, review_probability=0.1, table=table)
        refrozen = fit_optimal_two_step(
            view, review_probability=0.1, table=table, extra_iterations=2
        )
        assert refrozen.converged
        # re-freezing moves the root, but only slightly
        delta = np.max(np.abs(refrozen.beta - base.beta))
        assert 0.0 <= delta < 0.05

    def test_zero_conditional_mean_within_cells(self):
        cfg = standard_scenario(n=200_000, seed=35)
        view = analysis_view(generate(cfg))
        table = oracle_table(cfg)
        hv = h_values(view, table, np.asarray(cfg.beta_true))
        for key in cfg.level_keys():
            cell = view.x[:, 1] == key[1]
            se = np.std(hv[cell], ddof=1) / np.sqrt(cell.sum())
            assert abs(hv[cell].mean()) <= 3 * se

    def test_asymptotic_strict_improvement_on_spread_design(self):
        # deterministic enumeration of both asymptotic covariances
        cfg = spread_scenario()
        levels = [lvl.values for lvl in cfg.covariate_levels]
        t_chip, t_opt = asymptotic_trace_pair(
            levels=levels,
            weights=[lvl.weight for lvl in cfg.covariate_levels],
            lams=[cfg.lam(v) for v in levels],
            qs=[cfg.mismatch_rate(v) for v in levels],
            beta_true=cfg.beta_true,
            review_probability=cfg.review_probability,
        )
        assert t_opt < t_chip
        assert (t_chip - t_opt) / t_chip > 0.02  # a visible gain, not rounding

    def test_no_degradation_on_standard_design(self):
        cfg = standard_scenario()
        levels = [lvl.values for lvl in cfg.covariate_levels]
        t_chip, t_opt = asymptotic_trace_pair(
            levels=levels,
            weights=[lvl.weight for lvl in cfg.covariate_levels],
            lams=[cfg.lam(v) for v in levels],
            qs=[cfg.mismatch_rate(v) for v in levels],
            beta_true=cfg.beta_true,
            review_probability=cfg.review_probability,
        )
        assert t_opt <= t_chip + 1e-12

    def test_sandwich_trace_ordering_on_large_sample(self):
        cfg = spread_scenario(n=200_000, seed=36)
        view = analysis_view(generate(cfg))
        table = oracle_table(cfg)
        chip = fit_chipperfield(view, table)
        opt = fit_optimal_two_step(view, review_probability=0.1, table=table)
        assert np.trace(opt.covariance) <= np.trace(chip.covariance)

    def test_monte_carlo_direction_on_spread_design(self):
        # moderate replication count: the empirical dispersion of the
        # rescaled fit should not exceed the plain fit's
        from linkreg.estimators import EstimatorKind
        from linkreg.montecarlo import MCConfig, run_mc

        cfg = MCConfig(
            scenario=spread_scenario(),
            replications=150,
            estimators=(EstimatorKind.CHIPPERFIELD, EstimatorKind.OPTIMAL_TWO_STEP),
            base_seed=5150,
            table_mode="oracle",
        )
        report = run_mc(cfg)
        chip = report.summaries[EstimatorKind.CHIPPERFIELD]
        opt = report.summaries[EstimatorKind.OPTIMAL_TWO_STEP]
        assert opt.trace_empirical < chip.trace_empirical
        # the pair is (chipperfield, optimal): difference is
        # trace(optimal) - trace(chipperfield), so an interval entirely
        # above zero would claim the plain fit is strictly better
        (pw,) = report.pairwise
        assert pw.trace_difference < 0.0
        assert pw.bootstrap_ci_95[0] <= 0.0


class TestSandwichAttachment:
    def test_every_fit_carries_covariance(self):
        cfg = standard_scenario(n=2000, seed=41)
        ds = generate(cfg)
        view = analysis_view(ds)
        table = estimate_match_prob(view)
        for fit in (
            fit_oracle(ds),
            fit_naive(view),
            fit_chipperfield(view, table),
            fit_optimal_two_step(view, review_probability=0.5, table=table),
        ):
            assert fit.covariance is not None
            assert np.allclose(fit.covariance, fit.covariance.T, atol=1e-12)
            assert np.all(np.diag(fit.covariance) >= 0)
