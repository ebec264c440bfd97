"""Logistic mean, classical score, and a damped Newton root finder.

Every estimator in this package is the root of a p-dimensional
estimating equation with a closed-form Jacobian, so they all share the
solver implemented here. All functions are pure and safe to call
concurrently on shared, immutable inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, SingularJacobianError

__all__ = [
    "sigmoid",
    "mu",
    "classical_score",
    "classical_score_jacobian",
    "SolverOptions",
    "FitResult",
    "newton_solve",
]

# Reciprocal condition number below which a Jacobian is treated as
# singular (relative to its largest singular value).
RCOND_FLOOR = 1e-14

# The logistic mean is mathematically inside (0, 1) for finite inputs;
# keep the computed value there too instead of letting it round to an
# exact endpoint for |t| beyond ~37.
_MU_FLOOR = np.nextafter(0.0, 1.0)
_MU_CEIL = np.nextafter(1.0, 0.0)


def sigmoid(t):
    """Numerically stable logistic function 1/(1+exp(-t)).

    Branches on the sign of t so that no exp() call can overflow, even
    for |t| up to ~700, and clips to the open interval (0, 1).
    Accepts scalars or arrays.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    out = np.clip(out, _MU_FLOOR, _MU_CEIL)
    if out.ndim == 0:
        return float(out)
    return out


def _check_dims(beta: np.ndarray, x: np.ndarray) -> None:
    if x.shape[-1] != beta.shape[0]:
        raise ValueError(
            f"dimension mismatch: covariates have {x.shape[-1]} columns, "
            f"coefficients have length {beta.shape[0]}"
        )


def mu(beta, x):
    """Logistic regression mean exp(x'b)/(1+exp(x'b)).

    ``x`` may be a single covariate vector (returns a float) or an
    (n, p) matrix (returns a length-n array).
    """
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_dims(beta, x)
    return sigmoid(x @ beta)


def classical_score(x, y, beta, weights=None):
    """Score of the ordinary logistic likelihood: sum_i w_i x_i (y_i - mu_i).

    ``weights`` defaults to 1 for every row; the weighted form is what
    the linked-data estimators solve, with weights that do not depend
    on beta.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty row list")
    resid = y - mu(beta, x)
    if weights is not None:
        resid = resid * np.asarray(weights, dtype=float)
    return x.T @ resid


def classical_score_jacobian(x, beta, weights=None):
    """Derivative of the (weighted) score: -sum_i w_i mu_i(1-mu_i) x_i x_i'."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = mu(beta, x)
    v = m * (1.0 - m)
    if weights is not None:
        v = v * np.asarray(weights, dtype=float)
    return -(x * v[:, None]).T @ x


@dataclass(frozen=True)
class SolverOptions:
    """Newton solver controls. The defaults are deliberate package
    choices; nothing here is model-specific."""

    max_iterations: int = 100
    step_tolerance: float = 1e-10
    max_step_halvings: int = 30

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not (self.step_tolerance > 0):
            raise ValueError("step_tolerance must be > 0")
        if self.max_step_halvings < 0:
            raise ValueError("max_step_halvings must be >= 0")


@dataclass(frozen=True)
class FitResult:
    """Outcome of solving one estimating equation."""

    beta: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float
    covariance: np.ndarray | None = None


def _jacobian_singular(jac: np.ndarray, iteration: int) -> bool:
    s = np.linalg.svd(jac, compute_uv=False)
    if not np.all(np.isfinite(s)):
        raise DivergenceError(f"non-finite Jacobian at iteration {iteration}")
    return s[0] == 0.0 or s[-1] <= RCOND_FLOOR * s[0]


def newton_solve(score_fn, jacobian_fn, init, opts: SolverOptions | None = None) -> FitResult:
    """Find a root of ``score_fn`` by damped Newton-Raphson.

    ``jacobian_fn`` must be the exact derivative of ``score_fn``.
    Each iteration takes the full Newton step and halves it (up to
    ``max_step_halvings`` times) while the max-norm of the score fails
    to decrease; if no halving helps, the smallest trial step is
    accepted anyway and the iteration budget decides the outcome.
    Convergence is declared when the Newton step's max-norm falls at or
    below ``step_tolerance`` (or the score is exactly zero); otherwise
    the best iterate is returned with ``converged=False``.

    A Jacobian that is singular on entry (reciprocal condition below
    1e-14) raises, since the problem itself is rank-deficient; one that
    degenerates along the path (the separation signature, where the
    curvature weights underflow) ends the iteration with
    ``converged=False`` instead of raising.
    """
    if opts is None:
        opts = SolverOptions()
    beta = np.array(init, dtype=float, copy=True)
    if beta.ndim != 1:
        raise ValueError("init must be a 1-d coefficient vector")

    g = np.asarray(score_fn(beta), dtype=float)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite score at the initial point")
    gnorm = float(np.max(np.abs(g)))

    converged = False
    iterations = 0
    for iteration in range(1, opts.max_iterations + 1):
        iterations = iteration
        jac = np.asarray(jacobian_fn(beta), dtype=float)
        if _jacobian_singular(jac, iteration):
            if iteration == 1:
                s = np.linalg.svd(jac, compute_uv=False)
                raise SingularJacobianError(
                    f"singular Jacobian at iteration {iteration} "
                    f"(reciprocal condition {0.0 if s[0] == 0 else s[-1] / s[0]:.2e})"
                )
            break
        step = np.linalg.solve(jac, -g)

        if float(np.max(np.abs(step))) <= opts.step_tolerance:
            # at a root by the Newton metric: take the full step as is
            cand = beta + step
            gc = np.asarray(score_fn(cand), dtype=float)
            if np.all(np.isfinite(gc)):
                beta, g = cand, gc
                gnorm = float(np.max(np.abs(g)))
            converged = True
            break

        # Step halving: keep the first fraction that reduces the score
        # norm; remember the last finite candidate as a fallback.
        scale = 1.0
        accepted = None
        for _ in range(opts.max_step_halvings + 1):
            cand = beta + scale * step
            gc = np.asarray(score_fn(cand), dtype=float)
            if np.all(np.isfinite(gc)):
                accepted = (cand, gc)
                if float(np.max(np.abs(gc))) < gnorm:
                    break
            scale *= 0.5
        if accepted is None:
            raise DivergenceError(
                f"score is non-finite along the Newton direction at iteration {iteration}"
            )
        beta, g = accepted
        gnorm = float(np.max(np.abs(g)))

        if gnorm == 0.0:
            converged = True
            break

    return FitResult(
        beta=beta,
        converged=converged,
        iterations=iterations,
        final_score_norm=gnorm,
    )
