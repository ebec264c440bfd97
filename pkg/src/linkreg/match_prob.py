"""Clerical-sample estimation of match probabilities and residual moments.

Two plug-in quantities feed the optimal estimator: the conditional
match probability per observable (covariate level, observed response)
cell, estimated as a simple ratio over reviewed links, and the
per-level second moment of the weighted residual, estimated as a mean
over all links. Both tables key cells by the exact covariate vector
(the generator guarantees finite discrete support).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateCellError, NoReviewedRecordsError
from .linkage_sim import LinkedDataset, ScenarioConfig, covkey, level_index, true_match_prob, true_marginal_match_prob
from .model_core import mu

__all__ = [
    "CellEstimate",
    "MatchProbTable",
    "MomentCell",
    "ResidualMomentTable",
    "estimate_match_prob",
    "estimate_residual_moment",
    "oracle_table",
    "write_table_csv",
]

PROVENANCES = ("cell", "pooled-over-y", "global", "oracle")


@dataclass(frozen=True)
class CellEstimate:
    """Estimated P(D=1 | X, Y*) for one cell.

    ``n_matched``/``n_unmatched`` are the reviewed counts the estimate
    came from (pooled counts when a fallback was used); ``n_rows`` is
    the number of dataset rows in the cell, reviewed or not, which is
    what the within-level distribution of the observed response is
    read from.
    """

    p_hat: float
    n_matched: int
    n_unmatched: int
    n_rows: int
    provenance: str


@dataclass
class MatchProbTable:
    """Mapping (covariate level key, y*) -> CellEstimate.

    ``marginal`` optionally carries an analytic P(D=1 | X) per level;
    oracle tables fill it, estimated tables leave it None and the
    marginal is recovered by averaging cells over the empirical
    within-level distribution of the observed response.
    """

    cells: dict[tuple[tuple[float, ...], int], CellEstimate]
    marginal: dict[tuple[float, ...], float] | None = None

    def p_hat(self, key, y_star: int) -> float:
        try:
            return self.cells[(covkey(key), int(y_star))].p_hat
        except KeyError:
            raise DataError(
                f"match-probability table does not cover cell (x={covkey(key)}, y*={int(y_star)})"
            )

    def level_keys(self) -> list[tuple[float, ...]]:
        return sorted({key for key, _ in self.cells})

    def marginal_match_prob(self, key) -> float:
        """P(D=1 | X = key): analytic when available, otherwise the
        cell estimates averaged over the empirical y* distribution."""
        key = covkey(key)
        if self.marginal is not None:
            try:
                return self.marginal[key]
            except KeyError:
                raise DataError(f"no marginal match probability for level {key}")
        num = 0.0
        total = 0
        for y in (0, 1):
            cell = self.cells.get((key, y))
            if cell is not None:
                num += cell.p_hat * cell.n_rows
                total += cell.n_rows
        if total == 0:
            raise DataError(f"no rows recorded for covariate level {key}")
        return num / total

    def provenance_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in PROVENANCES}
        for cell in self.cells.values():
            counts[cell.provenance] += 1
        return counts


@dataclass(frozen=True)
class MomentCell:
    m_hat: float
    n_rows: int


@dataclass
class ResidualMomentTable:
    """Per covariate level estimate of E[P(D=1|X,Y*)^2 (Y*-mu)^2 | X]."""

    moments: dict[tuple[float, ...], MomentCell]

    def m_hat(self, key) -> float:
        try:
            return self.moments[covkey(key)].m_hat
        except KeyError:
            raise DataError(f"residual-moment table does not cover level {covkey(key)}")


def _reviewed_mask(ds: LinkedDataset) -> np.ndarray:
    reviewed = ds.r == 1
    if np.any(reviewed & ~np.isfinite(ds.d)):
        raise DataError("reviewed record without a match decision")
    return reviewed


def estimate_match_prob(ds: LinkedDataset, fallback_policy: str = "hierarchy") -> MatchProbTable:
    """Ratio estimator of P(D=1 | X, Y*) from the clerical sample.

    Each cell's estimate is (# reviewed matched)/(# reviewed) within
    the cell. Cells with no reviewed rows fall back, under the
    "hierarchy" policy, to the reviewed counts pooled over y* within
    the same level, then to the global reviewed counts; the provenance
    field records which rung supplied the estimate. Under "strict",
    an empty cell raises instead.
    """
    if fallback_policy not in ("hierarchy", "strict"):
        raise ValueError(f"unknown fallback_policy {fallback_policy!r}")
    reviewed = _reviewed_mask(ds)
    if not np.any(reviewed):
        raise NoReviewedRecordsError(
            "no clerically reviewed records: match probabilities cannot be estimated"
        )

    keys, lidx = level_index(ds.x)
    n_levels = len(keys)
    y = np.asarray(ds.y_star, dtype=np.int64)
    cell_id = lidx * 2 + y

    n_rows = np.bincount(cell_id, minlength=2 * n_levels)
    matched = np.bincount(cell_id[reviewed & (ds.d == 1)], minlength=2 * n_levels)
    reviewed_counts = np.bincount(cell_id[reviewed], minlength=2 * n_levels)
    unmatched = reviewed_counts - matched

    level_matched = matched.reshape(n_levels, 2).sum(axis=1)
    level_reviewed = reviewed_counts.reshape(n_levels, 2).sum(axis=1)
    global_matched = int(matched.sum())
    global_reviewed = int(reviewed_counts.sum())

    observed_y = sorted(int(v) for v in np.unique(y))
    cells: dict[tuple[tuple[float, ...], int], CellEstimate] = {}
    for li, key in enumerate(keys):
        for yv in observed_y:
            cid = li * 2 + yv
            n_rev = int(reviewed_counts[cid])
            if n_rev > 0:
                cells[(key, yv)] = CellEstimate(
                    p_hat=matched[cid] / n_rev,
                    n_matched=int(matched[cid]),
                    n_unmatched=int(unmatched[cid]),
                    n_rows=int(n_rows[cid]),
                    provenance="cell",
                )
                continue
            if fallback_policy == "strict":
                raise DataError(
                    f"no reviewed records in cell (x={key}, y*={yv}) and fallback is disabled"
                )
            if level_reviewed[li] > 0:
                cells[(key, yv)] = CellEstimate(
                    p_hat=level_matched[li] / level_reviewed[li],
                    n_matched=int(level_matched[li]),
                    n_unmatched=int(level_reviewed[li] - level_matched[li]),
                    n_rows=int(n_rows[cid]),
                    provenance="pooled-over-y",
                )
            else:
                cells[(key, yv)] = CellEstimate(
                    p_hat=global_matched / global_reviewed,
                    n_matched=global_matched,
                    n_unmatched=global_reviewed - global_matched,
                    n_rows=int(n_rows[cid]),
                    provenance="global",
                )
    return MatchProbTable(cells=cells)


def row_match_probs(ds: LinkedDataset, table: MatchProbTable) -> np.ndarray:
    """Table lookup vectorized over the dataset rows."""
    keys, lidx = level_index(ds.x)
    lut = np.empty((len(keys), 2))
    for li, key in enumerate(keys):
        for yv in (0, 1):
            cell = table.cells.get((key, yv))
            lut[li, yv] = np.nan if cell is None else cell.p_hat
    probs = lut[lidx, np.asarray(ds.y_star, dtype=np.int64)]
    if np.any(np.isnan(probs)):
        i = int(np.argmax(np.isnan(probs)))
        raise DataError(
            f"match-probability table does not cover cell "
            f"(x={covkey(ds.x[i])}, y*={int(ds.y_star[i])})"
        )
    return probs


def estimate_residual_moment(
    ds: LinkedDataset, table: MatchProbTable, beta
) -> ResidualMomentTable:
    """Ratio estimator of E[P(D=1|X,Y*)^2 (Y*-mu)^2 | X] per level.

    Sums run over every row of the dataset (reviewed or not), with mu
    evaluated at the supplied first-step coefficients.
    """
    beta = np.asarray(beta, dtype=float)
    p_hat = row_match_probs(ds, table)
    resid = np.asarray(ds.y_star, dtype=float) - mu(beta, ds.x)
    contrib = p_hat**2 * resid**2

    keys, lidx = level_index(ds.x)
    sums = np.bincount(lidx, weights=contrib, minlength=len(keys))
    counts = np.bincount(lidx, minlength=len(keys))
    moments = {
        key: MomentCell(m_hat=float(sums[li] / counts[li]), n_rows=int(counts[li]))
        for li, key in enumerate(keys)
    }
    return ResidualMomentTable(moments=moments)


def oracle_table(config: ScenarioConfig) -> MatchProbTable:
    """Exact match-probability table implied by a simulation scenario,
    with the analytic per-level marginal attached. Cells whose observed
    response has probability zero under both branches are omitted."""
    cells: dict[tuple[tuple[float, ...], int], CellEstimate] = {}
    marginal: dict[tuple[float, ...], float] = {}
    for key in config.level_keys():
        marginal[key] = true_marginal_match_prob(config, key)
        for yv in (0, 1):
            try:
                p = true_match_prob(config, key, yv)
            except DegenerateCellError:
                continue
            cells[(key, yv)] = CellEstimate(
                p_hat=p, n_matched=0, n_unmatched=0, n_rows=0, provenance="oracle"
            )
    return MatchProbTable(cells=cells, marginal=marginal)


def write_table_csv(table: MatchProbTable, path) -> None:
    """Audit export: one row per cell, covariates first."""
    keys = table.level_keys()
    if not keys:
        raise DataError("empty table")
    p = len(keys[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"x{j + 1}" for j in range(p)]
            + ["y_star", "p_hat", "n_matched", "n_unmatched", "provenance"]
        )
        for (key, yv), cell in sorted(table.cells.items()):
            writer.writerow(
                [repr(v) for v in key]
                + [yv, repr(cell.p_hat), cell.n_matched, cell.n_unmatched, cell.provenance]
            )
