"""Imbalance diagnostics, set-size calculus and component selection.

The central objects are the Mahalanobis distance of the treated-minus-
control covariate means (normalized by the sample covariance), the
noncentral chi-square approximation to the number of assignments with a
nearby imbalance, and the greedy rule that picks how many principal
components a regression adjustment can condition on while keeping that
number above a floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import chi2

from .core import Assignment, CenteredDesign

__all__ = [
    "BalanceReport",
    "ComponentSelection",
    "balance_report",
    "critical_noncentrality",
    "delta_between_arms",
    "expected_set_size",
    "mahalanobis_between",
    "mutz_inequality",
    "noncentral_chisq_cdf",
    "pca",
    "select_components",
]

# Poisson mixture terms are summed until the remaining tail mass drops
# below this bound, far under every tolerance used by the tests.
_POISSON_TAIL = 1e-12


@dataclass(frozen=True, eq=False)
class BalanceReport:
    """Per-covariate imbalance summary for one assignment."""

    delta: np.ndarray
    mahalanobis: float
    treated_means: np.ndarray
    control_means: np.ndarray
    treated_sds: np.ndarray
    control_sds: np.ndarray

    def __post_init__(self):
        if self.mahalanobis < 0:
            raise ValueError("mahalanobis distance cannot be negative")


@dataclass(frozen=True, eq=False)
class ComponentSelection:
    """Principal components of the covariates plus selection results.

    ``loadings`` columns are orthonormal eigenvectors of the covariate
    covariance, ordered by nonincreasing ``variances``.  ``selected_p``
    is filled in by :func:`select_components`; ``selected_p_fisher`` by
    the randomization-test variant.  ``n_delta_bar_trace`` records the
    approximate set size at each candidate component count, starting
    with the initial value at zero components.
    """

    loadings: np.ndarray
    variances: np.ndarray
    selected_p: Optional[int] = None
    selected_p_fisher: Optional[int] = None
    n_delta_bar_trace: Optional[np.ndarray] = None

    def __post_init__(self):
        k = self.loadings.shape[1]
        gram = self.loadings.T @ self.loadings
        if not np.allclose(gram, np.eye(k), atol=1e-8):
            raise ValueError("loadings are not orthonormal")
        if np.any(np.diff(self.variances) > 1e-12 * max(1.0, self.variances[0])):
            raise ValueError("component variances must be nonincreasing")
        if self.selected_p is not None and not 0 <= self.selected_p <= k:
            raise ValueError("selected_p out of range")
        if self.selected_p_fisher is not None:
            if self.selected_p is None or self.selected_p_fisher > self.selected_p:
                raise ValueError("selected_p_fisher must not exceed selected_p")

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    def scores(self, design: CenteredDesign) -> np.ndarray:
        """Component scores, the centered covariates times the loadings."""
        return design.z_tilde @ self.loadings


def delta_between_arms(design: CenteredDesign, a: Assignment) -> np.ndarray:
    """Treated-minus-control covariate means.

    Computed from the centered columns, whose sums over the two arms are
    exact negatives of each other.
    """
    w = a.w.astype(bool)
    treated_sum = design.z_tilde[w].sum(axis=0)
    return treated_sum * (a.n / (a.n0 * a.n1))


def _quadratic_form(delta: np.ndarray, design: CenteredDesign) -> float:
    x = design.solve_gram(delta)
    return float(delta @ x)


def balance_report(design: CenteredDesign, a: Assignment) -> BalanceReport:
    """Imbalance report for one assignment: delta, distance, arm summaries."""
    if design.n != a.n:
        raise ValueError("design and assignment disagree on n")
    w = a.w.astype(bool)
    delta = delta_between_arms(design, a)
    m = (a.n0 * a.n1 / a.n) * (a.n - 1) * _quadratic_form(delta, design)
    z1 = design.z_tilde[w]
    z0 = design.z_tilde[~w]

    def sds(arr):
        if arr.shape[0] > 1:
            return arr.std(axis=0, ddof=1)
        return np.full(arr.shape[1], np.nan)

    # Arm means are reported relative to the sample means, which is what
    # a balance table compares anyway.
    return BalanceReport(
        delta=delta,
        mahalanobis=max(0.0, m),
        treated_means=z1.mean(axis=0),
        control_means=z0.mean(axis=0),
        treated_sds=sds(z1),
        control_sds=sds(z0),
    )


def mahalanobis_between(
    design: CenteredDesign,
    a: Assignment,
    reference: Assignment,
    normalized: bool = True,
) -> float:
    """Distance between the imbalances of two assignments.

    With ``normalized=True`` (the default) the quadratic form uses the
    covariance-scaled Gram matrix, the same scale as
    :func:`balance_report`, so thresholds for the two distances are
    directly comparable.  ``normalized=False`` drops the (n - 1) factor.

    The imbalance difference is assembled from integer treated counts
    over distinct covariate rows, so assignments sharing an imbalance
    yield exactly zero.
    """
    if a.n != reference.n or a.n1 != reference.n1:
        raise ValueError("assignments must share n and n1")
    count_diff = design.treated_counts(a) - design.treated_counts(reference)
    if not count_diff.any():
        return 0.0
    kappa = a.n / (a.n0 * a.n1)
    diff = kappa * (count_diff @ design.distinct_rows)
    scale = (a.n - 1) if normalized else 1.0
    m = (a.n0 * a.n1 / a.n) * scale * _quadratic_form(diff, design)
    return max(0.0, float(m))


def noncentral_chisq_cdf(x: float, k: int, lam: float) -> float:
    """CDF of the noncentral chi-square distribution.

    Evaluated as the Poisson mixture of central chi-square CDFs with
    degrees of freedom k, k + 2, k + 4, ...; terms are accumulated until
    the remaining Poisson tail mass is below 1e-12.
    """
    if x < 0:
        raise ValueError("x must be nonnegative")
    if k < 1 or int(k) != k:
        raise ValueError("degrees of freedom must be a positive integer")
    if lam < 0:
        raise ValueError("noncentrality must be nonnegative")
    if x == 0.0:
        return 0.0
    half = lam / 2.0
    if half == 0.0:
        return float(chi2.cdf(x, k))
    # Chernoff-style bound: Poisson mass beyond half + 10 sqrt(half) + 40
    # is far below the tail target for any rate of interest here.
    j_max = int(half + 10.0 * math.sqrt(half) + 40.0)
    js = np.arange(j_max + 1)
    log_pmf = js * math.log(half) - half - np.array(
        [math.lgamma(j + 1.0) for j in js]
    )
    pmf = np.exp(log_pmf)
    cumulative = np.cumsum(pmf)
    cut = int(np.searchsorted(cumulative, 1.0 - _POISSON_TAIL) + 1)
    js = js[:cut]
    pmf = pmf[:cut]
    value = float(pmf @ chi2.cdf(x, k + 2 * js))
    return min(1.0, max(0.0, value))


def expected_set_size(
    delta_bar: float, k: int, m_delta: float, n_assignments: float
) -> float:
    """Approximate number of assignments within delta_bar of the observed one.

    The between-assignment distance follows a noncentral chi-square law
    with k degrees of freedom and noncentrality equal to the observed
    distance, so the expected count is that CDF at the threshold times
    the number of assignments.
    """
    if delta_bar < 0:
        raise ValueError("delta_bar must be nonnegative")
    return noncentral_chisq_cdf(delta_bar, k, m_delta) * float(n_assignments)


def critical_noncentrality(
    delta_bar: float, k: int, target_cdf: float, tol: float = 1e-12
) -> float:
    """Largest noncentrality whose CDF at delta_bar still reaches target_cdf.

    The CDF decreases strictly in the noncentrality, so the answer is the
    root of F(delta_bar; k, lam) = target_cdf.  Returns -inf when even
    the central distribution falls short, +inf when the target is never
    crossed (target <= 0).
    """
    if target_cdf <= 0.0:
        return math.inf
    central = noncentral_chisq_cdf(delta_bar, k, 0.0)
    if central < target_cdf:
        return -math.inf
    lo, hi = 0.0, 1.0
    while noncentral_chisq_cdf(delta_bar, k, hi) >= target_cdf:
        lo, hi = hi, hi * 2.0
        if hi > 1e9:
            return math.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if noncentral_chisq_cdf(delta_bar, k, mid) >= target_cdf:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, lo):
            break
    return lo


def pca(design: CenteredDesign) -> ComponentSelection:
    """Principal components of the covariate covariance.

    Loadings are eigenvectors ordered by descending eigenvalue.  Each
    column is signed so that its largest-magnitude entry is positive,
    which fixes the decomposition up to reordering of exactly tied
    eigenvalues.
    """
    try:
        eigvals, eigvecs = np.linalg.eigh(design.covariance)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ValueError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1]
    variances = eigvals[order]
    loadings = eigvecs[:, order]
    for j in range(loadings.shape[1]):
        pivot = int(np.argmax(np.abs(loadings[:, j])))
        if loadings[pivot, j] < 0:
            loadings[:, j] = -loadings[:, j]
    return ComponentSelection(loadings=loadings, variances=variances)


def component_distances(
    design: CenteredDesign, a: Assignment, selection: ComponentSelection
) -> np.ndarray:
    """Cumulative Mahalanobis distance over leading-component prefixes.

    Entry p - 1 is the distance computed on the first p component scores.
    Scores of distinct components are orthogonal, so each component adds
    an independent term.
    """
    scores = selection.scores(design)
    w = a.w.astype(bool)
    score_delta = scores[w].sum(axis=0) * (a.n / (a.n0 * a.n1))
    terms = (a.n0 * a.n1 / a.n) * score_delta**2 / selection.variances
    return np.cumsum(terms)


def select_components(
    design: CenteredDesign,
    a: Assignment,
    delta_bar: float,
    h: int,
    initial_n: Optional[float] = None,
) -> ComponentSelection:
    """Greedy component count selection for regression adjustment.

    Starting from zero components, the count grows while the expected
    number of assignments within ``delta_bar`` of the observed imbalance
    (measured on the selected components) stays at or above ``h``.
    ``initial_n`` defaults to the total number of assignments; passing
    half of it reproduces the heterogeneous-effects variant.  Zero is a
    valid outcome and means no adjustment (difference in means).
    """
    if delta_bar <= 0:
        raise ValueError("delta_bar must be positive")
    if h < 1:
        raise ValueError("h must be at least 1")
    if initial_n is None:
        initial_n = float(math.comb(a.n, a.n1))
    selection = pca(design)
    cumulative = component_distances(design, a, selection)
    p = 0
    n_db = float(initial_n)
    trace = [n_db]
    while n_db >= h and p < selection.k:
        candidate = p + 1
        n_db = expected_set_size(delta_bar, candidate, cumulative[candidate - 1], initial_n)
        trace.append(n_db)
        if n_db >= h:
            p = candidate
    return ComponentSelection(
        loadings=selection.loadings,
        variances=selection.variances,
        selected_p=p,
        n_delta_bar_trace=np.asarray(trace),
    )


def mutz_inequality(
    gamma: float, theta: float, var_z: float, n: int, r2: float
) -> bool:
    """Covariate-informativeness inequality for a single covariate.

    True when the squared covariate effect scaled by the error variance
    exceeds 1 / ((n - 1)(1 - r2)); the comparison is strict.
    """
    if theta == 0:
        raise ValueError("theta must be nonzero")
    if not 0 <= r2 < 1:
        raise ValueError("r2 must lie in [0, 1)")
    left = gamma * gamma * var_z / (theta * theta)
    right = 1.0 / ((n - 1) * (1.0 - r2))
    return left > right
