"""Vectorized evaluation of estimators over many assignments at once.

Internal module.  Every function takes a boolean assignment matrix with
one row per assignment and returns per-row statistics.  The algebra
exploits two identities: the treated-minus-control mean of any centered
column is the treated sum scaled by n / (n0 n1), and the regression
adjustment's numerator and denominator are low-rank functions of the
treated sums.  Observed outcomes are handled as y0 + W * (y1 - y0), so
heterogeneous effects vectorize as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .core import CenteredDesign

__all__ = [
    "BatchOLS",
    "batch_dm",
    "batch_ols",
    "batch_pca_prefix",
    "delta_matrix",
    "mahalanobis_from_delta",
    "quantile_bins",
    "two_sided_p",
]


def delta_matrix(wmat: np.ndarray, design: CenteredDesign) -> np.ndarray:
    """Treated-minus-control covariate means, one row per assignment."""
    n1 = int(wmat[0].sum())
    n0 = wmat.shape[1] - n1
    n = wmat.shape[1]
    return (wmat @ design.z_tilde) * (n / (n0 * n1))


def mahalanobis_from_delta(delta: np.ndarray, design: CenteredDesign, n1: int) -> np.ndarray:
    """Covariance-normalized imbalance distance for each delta row."""
    n = design.n
    n0 = n - n1
    solved = design.solve_gram(delta.T).T
    quad = np.einsum("ij,ij->i", delta, solved)
    return (n0 * n1 / n) * (n - 1) * np.maximum(quad, 0.0)


def two_sided_p(
    estimates: np.ndarray,
    std_errors: np.ndarray,
    dof,
    null_value: float = 0.0,
) -> np.ndarray:
    """Vectorized two-sided t-test p-values with the zero-variance convention.

    ``dof`` may be a scalar or a per-element array.
    """
    diff = np.abs(estimates - null_value)
    out = np.ones_like(diff)
    positive = std_errors > 0
    dof_arr = np.broadcast_to(np.asarray(dof), diff.shape)
    out[positive] = 2.0 * student_t.sf(
        diff[positive] / std_errors[positive], dof_arr[positive]
    )
    degenerate = ~positive & (diff != 0)
    out[degenerate] = 0.0
    return out


def batch_dm(
    wmat: np.ndarray, y0: np.ndarray, y1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Difference-in-means estimate and unpooled standard error per row."""
    n = wmat.shape[1]
    n1 = int(wmat[0].sum())
    n0 = n - n1
    w = wmat.astype(float)
    sum1 = w @ y1
    sum0 = np.sum(y0) - w @ y0
    mean1 = sum1 / n1
    mean0 = sum0 / n0
    sq1 = w @ (y1 * y1)
    sq0 = np.sum(y0 * y0) - w @ (y0 * y0)
    var1 = np.maximum(sq1 - n1 * mean1**2, 0.0) / (n1 - 1)
    var0 = np.maximum(sq0 - n0 * mean0**2, 0.0) / (n0 - 1)
    se = np.sqrt(var1 / n1 + var0 / n0)
    return mean1 - mean0, se


def batch_dm_sharp(wmat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Difference in means of a fixed outcome, mirror-exact.

    Both arm sums are separate matrix products over identical 0/1
    patterns, so the statistics of an assignment and its mirror are
    exact negations and their absolute values tie bitwise.  Use this
    for randomization-test statistics where tie detection matters.
    """
    n = wmat.shape[1]
    n1 = int(wmat[0].sum())
    n0 = n - n1
    w = wmat.astype(float)
    sum1 = w @ y
    sum0 = (1.0 - w) @ y
    return sum1 / n1 - sum0 / n0


@dataclass(frozen=True)
class BatchOLS:
    """Per-assignment regression-adjustment statistics.

    ``den`` is the treatment-residual sum of squares after projecting
    off the covariates, which also encodes the imbalance distance:
    den = (n0 n1 / n)(1 - M / (n - 1)).
    """

    estimates: np.ndarray
    std_errors: np.ndarray
    num: np.ndarray
    den: np.ndarray
    rss: np.ndarray


def _observed_terms(wmat, y0, y1):
    """Treated-sum building blocks of the observed outcome algebra."""
    d = y1 - y0
    w = wmat.astype(float)
    t_d = w @ d
    sum_y = math.fsum(y0) + t_d
    sumsq_y = float(y0 @ y0) + 2.0 * (w @ (y0 * d)) + w @ (d * d)
    w_dot_y = w @ y0 + t_d
    return d, w, sum_y, sumsq_y, w_dot_y


def batch_ols(
    wmat: np.ndarray, design: CenteredDesign, y0: np.ndarray, y1: np.ndarray
) -> BatchOLS:
    """Regression adjustment on the design's covariates for every row."""
    n, k = design.n, design.k
    n1 = int(wmat[0].sum())
    n0 = n - n1
    arms = n0 * n1 / n
    d, w, sum_y, sumsq_y, w_dot_y = _observed_terms(wmat, y0, y1)

    zw = w @ design.z_tilde
    zy = design.z_tilde.T @ y0 + w @ (design.z_tilde * d[:, None])
    zw_solved = design.solve_gram(zw.T).T
    zy_solved = design.solve_gram(zy.T).T

    den = arms - np.einsum("ij,ij->i", zw, zw_solved)
    w_tilde_y = w_dot_y - (n1 / n) * sum_y
    num = w_tilde_y - np.einsum("ij,ij->i", zw, zy_solved)
    # Assignments whose treatment indicator is collinear with the
    # covariates have no adjusted estimate; mark them NaN.
    usable = den > 1e-12 * arms
    safe_den = np.where(usable, den, 1.0)
    estimates = np.where(usable, num / safe_den, np.nan)

    y_tilde_sq = sumsq_y - sum_y**2 / n
    rss = y_tilde_sq - np.einsum("ij,ij->i", zy, zy_solved) - num**2 / safe_den
    rss = np.maximum(rss, 0.0)
    sigma2 = rss / (n - k - 2)
    std_errors = np.where(usable, np.sqrt(sigma2 / safe_den), np.nan)
    return BatchOLS(estimates=estimates, std_errors=std_errors, num=num, den=den, rss=rss)


@dataclass(frozen=True)
class BatchPCAPrefix:
    """Regression statistics for every leading-component prefix.

    Arrays are indexed [assignment, p] for p = 0..K components;
    ``m_prefix`` holds the imbalance distance measured on the first p
    components (column 0 is zero components, identically 0).
    """

    estimates: np.ndarray
    std_errors: np.ndarray
    m_prefix: np.ndarray
    den: np.ndarray


def batch_pca_prefix(
    wmat: np.ndarray,
    scores: np.ndarray,
    score_variances: np.ndarray,
    y0: np.ndarray,
    y1: np.ndarray,
) -> BatchPCAPrefix:
    """Adjustment statistics on component-score prefixes for every row.

    Scores of distinct components are orthogonal, so each component
    contributes an additive term to the numerator, denominator, residual
    sum of squares and imbalance distance; prefix results are cumulative
    sums over components.
    """
    n = wmat.shape[1]
    k = scores.shape[1]
    n1 = int(wmat[0].sum())
    n0 = n - n1
    arms = n0 * n1 / n
    d, w, sum_y, sumsq_y, w_dot_y = _observed_terms(wmat, y0, y1)

    norms = (n - 1) * score_variances  # squared column norms of the scores
    cw = w @ scores
    cy = scores.T @ y0 + w @ (scores * d[:, None])

    den_terms = cw**2 / norms
    num_terms = cw * cy / norms
    rss_terms = cy**2 / norms
    m_terms = (n / (n0 * n1)) * cw**2 / score_variances

    zeros = np.zeros((wmat.shape[0], 1))
    den = arms - np.hstack([zeros, np.cumsum(den_terms, axis=1)])
    num = (w_dot_y - (n1 / n) * sum_y)[:, None] - np.hstack(
        [zeros, np.cumsum(num_terms, axis=1)]
    )
    y_tilde_sq = (sumsq_y - sum_y**2 / n)[:, None]
    rss = y_tilde_sq - np.hstack([zeros, np.cumsum(rss_terms, axis=1)]) - num**2 / den
    rss = np.maximum(rss, 0.0)
    m_prefix = np.hstack([zeros, np.cumsum(m_terms, axis=1)])

    dof = n - np.arange(k + 1) - 2
    sigma2 = rss / dof
    estimates = num / den
    std_errors = np.sqrt(sigma2 / den)
    return BatchPCAPrefix(
        estimates=estimates, std_errors=std_errors, m_prefix=m_prefix, den=den
    )


def quantile_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-probability bin index per value, ties going to the lower bin.

    Bin edges are the 1/n_bins, ..., (n_bins - 1)/n_bins quantiles of the
    values themselves; intervals are left-closed on the right edge, so a
    value exactly equal to an edge lands in the lower bin.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    edges = np.quantile(values, np.arange(1, n_bins) / n_bins)
    return np.searchsorted(edges, values, side="left")
