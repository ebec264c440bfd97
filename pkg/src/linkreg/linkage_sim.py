"""Synthetic linked-file generator and its closed-form oracles.

A scenario describes N links between two files. Each link carries a
covariate vector drawn from a finite set of levels, a latent binary
response from the logistic model, a latent match indicator (false
positives occur when it is 0), the observed response (equal to the
latent response on matched links, independently redrawn otherwise),
and a Bernoulli clerical-review indicator. The analyst sees the match
status only on reviewed links and never sees the latent response.

Randomness comes from a counter-based Philox generator: all per-record
draws are taken as one (n, 5) block of uniforms indexed by record, so
the output is a pure function of (config, seed) regardless of how the
work is scheduled.

The ``true_*`` functions are exact consequences of the generative
mechanism (Bayes' rule over the matched/unmatched branches); they are
the oracles against which the estimation code is tested and the source
of "known match probability" tables.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError, DegenerateCellError, ParseError
from .model_core import mu

__all__ = [
    "CovariateLevel",
    "ScenarioConfig",
    "LinkedRecord",
    "LinkedDataset",
    "generate",
    "analysis_view",
    "true_match_prob",
    "true_marginal_match_prob",
    "true_y_star_rate",
    "true_residual_moment",
    "level_index",
    "covkey",
    "write_dataset_csv",
    "read_dataset_csv",
    "load_scenario_config",
    "scenario_config_from_dict",
    "scenario_config_to_dict",
]

_SEED_MASK = (1 << 64) - 1

POPULATION_MARGINAL = "population-marginal"


def covkey(values) -> tuple[float, ...]:
    """Canonical hashable key for a covariate level (bit-exact floats)."""
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class CovariateLevel:
    values: tuple[float, ...]
    weight: float


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of one simulated linkage scenario.

    ``match_model`` is either a single probability (the same for every
    covariate level) or a mapping from level key to probability.
    ``mismatch_response_model`` is the Bernoulli rate of the observed
    response on false-positive links: a constant, a per-level mapping,
    or the string "population-marginal" meaning the population rate of
    the latent response (a record swapped with a random individual).
    """

    n: int
    beta_true: tuple[float, ...]
    covariate_levels: tuple[CovariateLevel, ...]
    match_model: float | Mapping[tuple[float, ...], float] = 1.0
    mismatch_response_model: float | Mapping[tuple[float, ...], float] | str = POPULATION_MARGINAL
    review_probability: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be a positive integer")
        beta = np.asarray(self.beta_true, dtype=float)
        if beta.ndim != 1 or beta.size < 1 or not np.all(np.isfinite(beta)):
            raise ConfigError("beta_true must be a nonempty finite vector")
        if not self.covariate_levels:
            raise ConfigError("covariate_levels must be nonempty")
        p = len(beta)
        total = 0.0
        for lvl in self.covariate_levels:
            if len(lvl.values) != p:
                raise ConfigError(
                    f"covariate level {lvl.values} has length {len(lvl.values)}, expected {p}"
                )
            if lvl.values[0] != 1.0:
                raise ConfigError(f"covariate level {lvl.values}: first entry must be exactly 1")
            if not all(np.isfinite(v) for v in lvl.values):
                raise ConfigError(f"covariate level {lvl.values} has non-finite entries")
            if not (lvl.weight >= 0):
                raise ConfigError("covariate level weights must be nonnegative")
            total += lvl.weight
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"covariate level weights sum to {total!r}, expected 1")
        keys = [covkey(lvl.values) for lvl in self.covariate_levels]
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate covariate levels")
        for key in keys:
            lam = self.lam(key)
            if not (0.0 < lam <= 1.0):
                raise ConfigError(f"match probability for level {key} is {lam}, must be in (0,1]")
            q = self.mismatch_rate(key)
            if not (0.0 <= q <= 1.0):
                raise ConfigError(f"mismatch response rate for level {key} is {q}, must be in [0,1]")
        if not (0.0 <= self.review_probability <= 1.0):
            raise ConfigError("review_probability must be in [0,1]")

    @property
    def p(self) -> int:
        return len(self.beta_true)

    def level_keys(self) -> list[tuple[float, ...]]:
        return [covkey(lvl.values) for lvl in self.covariate_levels]

    def level_matrix(self) -> np.ndarray:
        return np.array([lvl.values for lvl in self.covariate_levels], dtype=float)

    def level_weights(self) -> np.ndarray:
        return np.array([lvl.weight for lvl in self.covariate_levels], dtype=float)

    def lam(self, key) -> float:
        """Match probability P(D=1 | X = key)."""
        if isinstance(self.match_model, Mapping):
            try:
                return float(self.match_model[covkey(key)])
            except KeyError:
                raise ConfigError(f"match_model has no entry for covariate level {covkey(key)}")
        return float(self.match_model)

    def marginal_response_rate(self) -> float:
        """Population rate of the latent response across levels."""
        rates = mu(np.asarray(self.beta_true, float), self.level_matrix())
        return float(np.dot(self.level_weights(), np.atleast_1d(rates)))

    def mismatch_rate(self, key) -> float:
        """Bernoulli rate of the observed response on unmatched links."""
        model = self.mismatch_response_model
        if isinstance(model, str):
            if model != POPULATION_MARGINAL:
                raise ConfigError(f"unknown mismatch_response_model {model!r}")
            return self.marginal_response_rate()
        if isinstance(model, Mapping):
            try:
                return float(model[covkey(key)])
            except KeyError:
                raise ConfigError(
                    f"mismatch_response_model has no entry for covariate level {covkey(key)}"
                )
        return float(model)


@dataclass(frozen=True)
class LinkedRecord:
    """One link as seen by estimation code. ``d`` and ``y_latent`` are
    None when unobserved."""

    x: np.ndarray
    y_star: int
    r: int
    d: int | None
    y_latent: int | None


@dataclass
class LinkedDataset:
    """Column store of linked records.

    ``d`` and ``y_latent`` are float arrays using NaN for values that
    are absent (not reviewed / analysis view). ``config`` echoes the
    generating scenario and is None for ingested real data.
    """

    x: np.ndarray
    y_star: np.ndarray
    r: np.ndarray
    d: np.ndarray
    y_latent: np.ndarray
    config: ScenarioConfig | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        if n == 0:
            raise DataError("dataset must be nonempty")
        for name in ("y_star", "r", "d", "y_latent"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"column {name} has wrong length")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return bool(np.all(np.isfinite(self.y_latent)) and np.all(np.isfinite(self.d)))

    def record(self, i: int) -> LinkedRecord:
        d = self.d[i]
        y = self.y_latent[i]
        return LinkedRecord(
            x=self.x[i],
            y_star=int(self.y_star[i]),
            r=int(self.r[i]),
            d=None if np.isnan(d) else int(d),
            y_latent=None if np.isnan(y) else int(y),
        )


def _per_level_arrays(config: ScenarioConfig):
    keys = config.level_keys()
    lam = np.array([config.lam(k) for k in keys])
    q = np.array([config.mismatch_rate(k) for k in keys])
    mu_true = np.atleast_1d(mu(np.asarray(config.beta_true, float), config.level_matrix()))
    return lam, q, mu_true


def generate(config: ScenarioConfig) -> LinkedDataset:
    """Draw a complete (ground truth included) linked dataset.

    Identical config (including seed) gives a bit-identical dataset:
    record i consumes exactly row i of one Philox-generated block of
    uniforms, so results do not depend on evaluation order.
    """
    rng = np.random.Generator(np.random.Philox(key=config.seed & _SEED_MASK))
    u = rng.random((config.n, 5))

    weights = config.level_weights()
    cum = np.cumsum(weights)
    cum[-1] = 1.0  # guard against accumulated rounding
    idx = np.searchsorted(cum, u[:, 0], side="right")

    levels = config.level_matrix()
    lam, q, mu_true = _per_level_arrays(config)

    x = levels[idx]
    y_latent = (u[:, 1] < mu_true[idx]).astype(np.int8)
    d = (u[:, 2] < lam[idx]).astype(np.int8)
    y_mismatch = (u[:, 3] < q[idx]).astype(np.int8)
    y_star = np.where(d == 1, y_latent, y_mismatch).astype(np.int8)
    r = (u[:, 4] < config.review_probability).astype(np.int8)

    return LinkedDataset(
        x=x,
        y_star=y_star,
        r=r,
        d=d.astype(float),
        y_latent=y_latent.astype(float),
        config=config,
    )


def analysis_view(ds: LinkedDataset) -> LinkedDataset:
    """Project a dataset onto what a real analyst observes: the latent
    response disappears entirely and the match status survives only on
    reviewed links. Idempotent."""
    d = np.where(ds.r == 1, ds.d, np.nan)
    return LinkedDataset(
        x=ds.x.copy(),
        y_star=ds.y_star.copy(),
        r=ds.r.copy(),
        d=d,
        y_latent=np.full(len(ds), np.nan),
        config=ds.config,
    )


def true_match_prob(config: ScenarioConfig, x, y_star: int) -> float:
    """Exact P(D=1 | X=x, Y*=y_star) under the generative mechanism.

    Bayes' rule over the two branches: matched links carry the latent
    response (logistic mean), unmatched links carry an independent
    Bernoulli(mismatch rate).
    """
    key = covkey(np.atleast_1d(x))
    lam = config.lam(key)
    m = mu(np.asarray(config.beta_true, float), np.asarray(key))
    q = config.mismatch_rate(key)
    like_matched = m if y_star == 1 else 1.0 - m
    like_unmatched = q if y_star == 1 else 1.0 - q
    num = lam * like_matched
    den = num + (1.0 - lam) * like_unmatched
    if den <= 0.0:
        raise DegenerateCellError(
            f"observed response {y_star} has probability 0 at covariate level {key}"
        )
    return num / den


def true_marginal_match_prob(config: ScenarioConfig, x) -> float:
    """Exact P(D=1 | X=x); the match mechanism never looks at Y*."""
    return config.lam(covkey(np.atleast_1d(x)))


def true_y_star_rate(config: ScenarioConfig, x) -> float:
    """Exact P(Y*=1 | X=x): mixture of the latent rate and the
    mismatch rate."""
    key = covkey(np.atleast_1d(x))
    lam = config.lam(key)
    m = mu(np.asarray(config.beta_true, float), np.asarray(key))
    return lam * m + (1.0 - lam) * config.mismatch_rate(key)


def true_residual_moment(config: ScenarioConfig, x, beta) -> float:
    """Exact E[P(D=1|X,Y*)^2 (Y* - mu(beta,x))^2 | X=x] by enumerating
    the four (match status, observed response) outcomes."""
    key = covkey(np.atleast_1d(x))
    lam = config.lam(key)
    m_true = mu(np.asarray(config.beta_true, float), np.asarray(key))
    q = config.mismatch_rate(key)
    m_beta = mu(np.asarray(beta, float), np.asarray(key))
    total = 0.0
    for y in (0, 1):
        prob = lam * (m_true if y == 1 else 1.0 - m_true) + (1.0 - lam) * (
            q if y == 1 else 1.0 - q
        )
        if prob <= 0.0:
            continue
        total += prob * true_match_prob(config, x, y) ** 2 * (y - m_beta) ** 2
    return total


def level_index(x: np.ndarray):
    """Unique covariate rows of a design matrix and the per-row level
    index. Rows are compared bit-exactly; the ordering is the
    lexicographic order of the rows (deterministic)."""
    levels, inverse = np.unique(x, axis=0, return_inverse=True)
    keys = [covkey(row) for row in levels]
    return keys, inverse.ravel()


# ---------------------------------------------------------------------------
# Dataset CSV and scenario config files
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    # repr of a Python float is the shortest string that round-trips.
    return repr(float(v))


def write_dataset_csv(ds: LinkedDataset, path) -> None:
    """Write the dataset in the documented CSV layout:
    x1,...,xp,y_star,r,d,y_latent with empty cells for absent values."""
    p = ds.p
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(p)] + ["y_star", "r", "d", "y_latent"])
        for i in range(len(ds)):
            row = [_fmt(v) for v in ds.x[i]]
            row.append(str(int(ds.y_star[i])))
            row.append(str(int(ds.r[i])))
            row.append("" if np.isnan(ds.d[i]) else str(int(ds.d[i])))
            row.append("" if np.isnan(ds.y_latent[i]) else str(int(ds.y_latent[i])))
            writer.writerow(row)


def read_dataset_csv(path) -> LinkedDataset:
    """Read a dataset written by :func:`write_dataset_csv` (or produced
    externally in the same layout). Raises :class:`ParseError` with the
    offending line number on malformed content."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=str(path), line=1)
        if len(header) < 5 or header[-4:] != ["y_star", "r", "d", "y_latent"]:
            raise ParseError(
                "header must be x1,...,xp,y_star,r,d,y_latent", path=str(path), line=1
            )
        p = len(header) - 4
        if header[:p] != [f"x{j + 1}" for j in range(p)]:
            raise ParseError("covariate columns must be named x1..xp", path=str(path), line=1)

        xs, ys, rs, dsc, yl = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 4:
                raise ParseError(
                    f"expected {p + 4} fields, found {len(row)}", path=str(path), line=lineno
                )
            try:
                xrow = [float(v) for v in row[:p]]
                y_star = int(row[p])
                r = int(row[p + 1])
                d = float("nan") if row[p + 2] == "" else float(int(row[p + 2]))
                y_lat = float("nan") if row[p + 3] == "" else float(int(row[p + 3]))
            except ValueError as exc:
                raise ParseError(str(exc), path=str(path), line=lineno)
            if xrow[0] != 1.0:
                raise ParseError("x1 must be 1 (intercept column)", path=str(path), line=lineno)
            if y_star not in (0, 1) or r not in (0, 1):
                raise ParseError("y_star and r must be 0 or 1", path=str(path), line=lineno)
            xs.append(xrow)
            ys.append(y_star)
            rs.append(r)
            dsc.append(d)
            yl.append(y_lat)
    if not xs:
        raise ParseError("no data rows", path=str(path), line=2)
    return LinkedDataset(
        x=np.array(xs, dtype=float),
        y_star=np.array(ys, dtype=np.int8),
        r=np.array(rs, dtype=np.int8),
        d=np.array(dsc, dtype=float),
        y_latent=np.array(yl, dtype=float),
        config=None,
    )


def _rows_to_mapping(rows, what: str) -> dict[tuple[float, ...], float]:
    out = {}
    for row in rows:
        if not isinstance(row, (list, tuple)) or len(row) < 2:
            raise ConfigError(f"{what} rows must be [x1,...,xp,value]")
        out[covkey(row[:-1])] = float(row[-1])
    return out


def scenario_config_from_dict(doc: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from the documented flat JSON layout."""
    if not isinstance(doc, dict):
        raise ConfigError("scenario config must be a JSON object")
    required = ["n", "beta_true", "covariate_levels", "review_probability", "seed"]
    for k in required:
        if k not in doc:
            raise ConfigError(f"scenario config is missing required key {k!r}")
    levels = []
    for row in doc["covariate_levels"]:
        if not isinstance(row, (list, tuple)) or len(row) < 2:
            raise ConfigError("covariate_levels rows must be [x1,...,xp,weight]")
        levels.append(CovariateLevel(values=covkey(row[:-1]), weight=float(row[-1])))

    match_model = doc.get("match_model", 1.0)
    if isinstance(match_model, dict):
        if "cell_table" not in match_model:
            raise ConfigError("match_model object must have a 'cell_table' key")
        match_model = _rows_to_mapping(match_model["cell_table"], "match_model cell_table")
    else:
        match_model = float(match_model)

    mm = doc.get("mismatch_response_model", POPULATION_MARGINAL)
    if isinstance(mm, dict):
        if "cell_table" not in mm:
            raise ConfigError("mismatch_response_model object must have a 'cell_table' key")
        mm = _rows_to_mapping(mm["cell_table"], "mismatch_response_model cell_table")
    elif isinstance(mm, str):
        pass
    else:
        mm = float(mm)

    return ScenarioConfig(
        n=int(doc["n"]),
        beta_true=covkey(doc["beta_true"]),
        covariate_levels=tuple(levels),
        match_model=match_model,
        mismatch_response_model=mm,
        review_probability=float(doc["review_probability"]),
        seed=int(doc["seed"]),
    )


def scenario_config_to_dict(config: ScenarioConfig) -> dict:
    """Inverse of :func:`scenario_config_from_dict` (for report echoes)."""
    if isinstance(config.match_model, Mapping):
        match_model = {
            "cell_table": [list(k) + [v] for k, v in sorted(config.match_model.items())]
        }
    else:
        match_model = config.match_model
    mm = config.mismatch_response_model
    if isinstance(mm, Mapping):
        mm = {"cell_table": [list(k) + [v] for k, v in sorted(mm.items())]}
    return {
        "n": config.n,
        "beta_true": list(config.beta_true),
        "covariate_levels": [list(l.values) + [l.weight] for l in config.covariate_levels],
        "match_model": match_model,
        "mismatch_response_model": mm,
        "review_probability": config.review_probability,
        "seed": config.seed,
    }


def load_scenario_config(path) -> ScenarioConfig:
    """Load a scenario config from a JSON file."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}")
    return scenario_config_from_dict(doc)
