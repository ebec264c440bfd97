"""Logistic regression on linked records with false-positive links.

Simulates linked files with clerical-review samples, fits weighted
estimating-equation and optimal two-step estimators, estimates
sandwich covariances, and audits the score identity whose failure
motivates the reweighting.
"""
from .errors import (
    ConfigError,
    DataError,
    DegenerateCellError,
    DivergenceError,
    LinkregError,
    NoReviewedRecordsError,
    NumericalError,
    ParseError,
    SingularJacobianError,
)
from .estimators import (
    EstimatorKind,
    fit_chipperfield,
    fit_naive,
    fit_optimal_two_step,
    fit_oracle,
    h_value,
    h_values,
    optimal_weight,
)
from .inference import (
    GapReport,
    SandwichEstimate,
    check_positive_definite,
    closed_form_gap,
    difference_score_gap,
    enumerated_gap_terms,
    gap_report_to_dict,
    matrix_from_json,
    matrix_to_json,
    sandwich,
    sandwich_to_dict,
    score_identity_audit,
)
from .linkage_sim import (
    CovariateLevel,
    LinkedDataset,
    LinkedRecord,
    ScenarioConfig,
    analysis_view,
    generate,
    load_scenario_config,
    read_dataset_csv,
    true_marginal_match_prob,
    true_match_prob,
    true_residual_moment,
    true_y_star_rate,
    write_dataset_csv,
)
from .match_prob import (
    CellEstimate,
    MatchProbTable,
    ResidualMomentTable,
    estimate_match_prob,
    estimate_residual_moment,
    oracle_table,
    write_table_csv,
)
from .model_core import (
    FitResult,
    SolverOptions,
    classical_score,
    classical_score_jacobian,
    mu,
    newton_solve,
    sigmoid,
)
from .montecarlo import MCConfig, MCReport, run_mc

__version__ = "0.1.0"
