"""Per-replication estimate export and figure rendering.

The study's delimited output is one row per (replication, estimator)
with the fitted coefficients; the figures summarizing the same run are
written next to it. matplotlib is imported lazily so that the
estimation core never touches a plotting backend.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .montecarlo import MCReport

__all__ = ["write_estimates_csv", "render_figures"]


def write_estimates_csv(report: MCReport, path) -> None:
    """One row per replication and estimator; failed replications keep
    their row with empty coefficient fields."""
    p = report.config.scenario.p
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["replication", "seed", "estimator", "converged"]
            + [f"beta_{j}" for j in range(p)]
        )
        for kind, summary in report.summaries.items():
            for k in range(report.config.replications):
                row = summary.estimates[k]
                ok = bool(np.all(np.isfinite(row)))
                writer.writerow(
                    [k, report.replication_seeds[k], kind.value, int(ok)]
                    + ([repr(float(v)) for v in row] if ok else [""] * p)
                )


def render_figures(report: MCReport, csv_path) -> list[Path]:
    """Render summary figures next to the estimates CSV.

    Produces <stem>_estimates.png (sampling clouds of the first two
    coefficients, or histograms when p = 1), <stem>_bias.png (bias per
    coefficient with 3-standard-error bars), and <stem>_trace.png
    (empirical covariance traces). Returns the written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    stem = csv_path.with_suffix("")
    beta_true = np.asarray(report.config.scenario.beta_true, dtype=float)
    p = beta_true.size
    kinds = list(report.summaries)
    written = []

    fig, ax = plt.subplots(figsize=(6.5, 5))
    for kind in kinds:
        est = report.summaries[kind].estimates
        ok = np.all(np.isfinite(est), axis=1)
        good = est[ok]
        if good.shape[0] == 0:
            continue
        if p >= 2:
            ax.scatter(good[:, 0], good[:, 1], s=6, alpha=0.4, label=kind.value)
        else:
            ax.hist(good[:, 0], bins=40, alpha=0.5, label=kind.value)
    if p >= 2:
        ax.axvline(beta_true[0], color="k", lw=0.8, ls="--")
        ax.axhline(beta_true[1], color="k", lw=0.8, ls="--")
        ax.set_xlabel("beta_0")
        ax.set_ylabel("beta_1")
    else:
        ax.axvline(beta_true[0], color="k", lw=0.8, ls="--")
        ax.set_xlabel("beta_0")
    ax.legend()
    ax.set_title("Replication estimates")
    path = Path(f"{stem}_estimates.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6.5, 4))
    width = 0.8 / max(len(kinds), 1)
    offsets = np.arange(p)
    for j, kind in enumerate(kinds):
        s = report.summaries[kind]
        if s.n_converged < 2:
            continue
        se = np.sqrt(np.diag(s.empirical_covariance) / s.n_converged)
        ax.bar(
            offsets + j * width,
            s.bias,
            width=width,
            yerr=3 * se,
            capsize=3,
            label=kind.value,
        )
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(offsets + 0.4 - width / 2, [f"beta_{j}" for j in range(p)])
    ax.set_ylabel("bias (error bars: 3 MC SE)")
    ax.legend()
    ax.set_title("Bias by estimator")
    path = Path(f"{stem}_bias.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    names = [k.value for k in kinds]
    traces = [report.summaries[k].trace_empirical for k in kinds]
    ax.bar(names, traces)
    ax.set_ylabel("trace of empirical covariance")
    ax.set_title("Estimator dispersion")
    path = Path(f"{stem}_trace.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    return written
