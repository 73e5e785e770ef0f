"""Ground-truth engines for conditional moments.

Two independent routes to the same quantities: closed-form expressions
for a single binary covariate (treated-count frequencies and the
quadratic-in-imbalance conditional variance), and brute-force enumeration
of all assignments for any small sample.  The tests drive both routes
against each other; the rest of the package treats enumeration as the
oracle for conditional means, variances and mean squared errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from . import _batch
from .balance import balance_report
from .core import Assignment, CenteredDesign, Sample, assignment_matrix, fit_projection

__all__ = [
    "ConditionalGroup",
    "ConditionalMoments",
    "DummyDesign",
    "attainable_deltas",
    "brute_force_conditional",
    "conditional_moment_groups",
    "dummy_conditional_variance",
    "dummy_frequencies",
]


@dataclass(frozen=True)
class ConditionalMoments:
    """Mean, variance and mean squared error over one conditioning set."""

    mean: float
    variance: float
    mse: float
    set_size: int

    def __post_init__(self):
        if self.variance < -1e-12:
            raise ValueError("variance cannot be negative")
        if self.mse < self.variance - 1e-12:
            raise ValueError("mse cannot fall below the variance")


def attainable_deltas(n: int, n1: int, n_z: int) -> tuple[np.ndarray, np.ndarray]:
    """All attainable imbalance values for a binary covariate.

    Returns (treated_counts, deltas): the feasible counts of treated
    units among the covariate-one group and the implied treated-minus-
    control covariate mean differences.
    """
    n0 = n - n1
    t_low = max(0, n1 - (n - n_z))
    t_high = min(n1, n_z)
    counts = np.arange(t_low, t_high + 1)
    deltas = counts / n1 - (n_z - counts) / n0
    return counts, deltas


@dataclass(frozen=True, eq=False)
class DummyDesign:
    """A single binary covariate held at a fixed attainable imbalance.

    ``residuals_z1`` and ``residuals_z0`` are the projection residuals
    over the covariate-one and covariate-zero groups; each group sums to
    zero because the covariate is part of the projection.
    """

    n: int
    n1: int
    n_z: int
    delta: float
    residuals_z1: np.ndarray
    residuals_z0: np.ndarray

    def __post_init__(self):
        r1 = np.asarray(self.residuals_z1, dtype=float).ravel()
        r0 = np.asarray(self.residuals_z0, dtype=float).ravel()
        if len(r1) != self.n_z or len(r0) != self.n - self.n_z:
            raise ValueError("residual groups must have sizes n_z and n - n_z")
        scale = max(1.0, float(np.max(np.abs(np.concatenate([r1, r0])))))
        for name, group in (("covariate-one", r1), ("covariate-zero", r0)):
            if abs(math.fsum(group)) > 1e-9 * scale * self.n:
                raise ValueError(f"{name} residuals do not sum to zero")
        self.treated_count  # validates attainability
        object.__setattr__(self, "residuals_z1", r1)
        object.__setattr__(self, "residuals_z0", r0)

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def treated_count(self) -> int:
        """Implied number of treated units in the covariate-one group."""
        t_exact = self.n1 * (self.delta * self.n0 / self.n + self.n_z / self.n)
        t = round(t_exact)
        counts, deltas = attainable_deltas(self.n, self.n1, self.n_z)
        if abs(t_exact - t) > 1e-9 or t not in counts:
            raise ValueError(
                f"imbalance {self.delta} is not attainable; attainable values: "
                f"{np.round(deltas, 6).tolist()}"
            )
        return int(t)

    @property
    def set_size(self) -> int:
        t = self.treated_count
        return math.comb(self.n_z, t) * math.comb(self.n - self.n_z, self.n1 - t)


def dummy_frequencies(d: DummyDesign) -> tuple[float, float, float, float, float, float]:
    """Treatment-pattern frequencies over the fixed-imbalance set.

    Returns (f1, f2, f3, f4, f6, f7): the single-unit treatment
    frequencies for the covariate-one and covariate-zero groups, the
    both-treated pair frequencies within each group, and the
    treated/control split pair frequencies within each group.
    """
    if d.n_z < 2 or d.n - d.n_z < 2:
        raise ValueError("both covariate groups need at least two units")
    d.treated_count  # raises if the imbalance is unattainable
    n, n0, n1, n_z = d.n, d.n0, d.n1, d.n_z
    delta = d.delta
    f1 = n1 / n + (n0 * n1 / (n * n_z)) * delta
    f2 = n1 / n - (n0 * n1 / (n * (n - n_z))) * delta
    f3 = f1 * (n_z * f1 - 1.0) / (n_z - 1.0)
    f4 = f2 * ((n - n_z) * f2 - 1.0) / (n - n_z - 1.0)
    f6 = n_z * f1 * (1.0 - f1) / (n_z - 1.0)
    f7 = (n - n_z) * f2 * (1.0 - f2) / (n - n_z - 1.0)
    return f1, f2, f3, f4, f6, f7


def _variance_coefficients(d: DummyDesign) -> tuple[float, float]:
    """Coefficients on the two residual sums of squares."""
    n, n0, n1, n_z = d.n, d.n0, d.n1, d.n_z
    delta = d.delta
    if n0 == n1:
        coef1 = 4.0 * n_z / (n**2 * (n_z - 1.0)) - delta**2 / (n_z * (n_z - 1.0))
        coef0 = 4.0 * (n - n_z) / (n**2 * (n - n_z - 1.0)) - delta**2 / (
            (n - n_z) * (n - n_z - 1.0)
        )
        general = _general_variance_coefficients(d)
        if abs(coef1 - general[0]) > 1e-12 or abs(coef0 - general[1]) > 1e-12:
            raise AssertionError(
                "balanced-case variance formula disagrees with the general one"
            )
        return coef1, coef0
    return _general_variance_coefficients(d)


def _general_variance_coefficients(d: DummyDesign) -> tuple[float, float]:
    n, n0, n1, n_z = d.n, d.n0, d.n1, d.n_z
    delta = d.delta
    coef1 = (
        n_z / (n0 * n1 * (n_z - 1.0))
        + (n0 - n1) / (n0 * n1 * (n_z - 1.0)) * delta
        - delta**2 / (n_z * (n_z - 1.0))
    )
    coef0 = (
        (n - n_z) / (n0 * n1 * (n - n_z - 1.0))
        + (n1 - n0) / (n0 * n1 * (n - n_z - 1.0)) * delta
        - delta**2 / ((n - n_z) * (n - n_z - 1.0))
    )
    return coef1, coef0


def dummy_conditional_variance(d: DummyDesign) -> ConditionalMoments:
    """Conditional moments of the residual mean difference, closed form.

    The conditional mean is exactly zero because each residual group sums
    to zero; the variance is quadratic in the conditioned imbalance.
    When the experiment is balanced the simplified formula is used and
    checked against the general one.
    """
    if d.n_z < 2 or d.n - d.n_z < 2:
        raise ValueError("both covariate groups need at least two units")
    coef1, coef0 = _variance_coefficients(d)
    ss1 = float(d.residuals_z1 @ d.residuals_z1)
    ss0 = float(d.residuals_z0 @ d.residuals_z0)
    variance = max(0.0, coef1 * ss1 + coef0 * ss0)
    return ConditionalMoments(
        mean=0.0, variance=variance, mse=variance, set_size=d.set_size
    )


@dataclass(frozen=True)
class ConditionalGroup:
    """Enumerated conditional moments for one conditioning cell."""

    key: tuple
    mean_delta: np.ndarray
    mean_mahalanobis: float
    size: int
    estimator: ConditionalMoments
    eps_diff: ConditionalMoments


def _moments(values: np.ndarray, center: float) -> ConditionalMoments:
    mean = float(values.mean())
    variance = float(values.var())
    mse = float(np.mean((values - center) ** 2))
    return ConditionalMoments(
        mean=mean, variance=variance, mse=max(mse, 0.0), set_size=len(values)
    )


def _estimator_values(
    sample: Sample, design: CenteredDesign, wmat: np.ndarray, estimator: str
) -> np.ndarray:
    if estimator == "DM":
        est, _ = _batch.batch_dm(wmat, sample.y0, sample.y1)
        return est
    if estimator == "OLS_Z":
        return _batch.batch_ols(wmat, design, sample.y0, sample.y1).estimates
    raise ValueError(f"unknown estimator {estimator!r}")


def conditional_moment_groups(
    sample: Sample,
    n1: int,
    estimator: Literal["DM", "OLS_Z"],
    conditioner: Literal["EXACT_DELTA", "M_QUANTILE"],
    n_bins: int = 5,
    max_assignments: Optional[int] = None,
) -> list[ConditionalGroup]:
    """Enumerate all assignments and group conditional moments.

    ``EXACT_DELTA`` groups by the exact treated-count pattern over
    distinct covariate rows (the discrete analogue of an exact imbalance
    match); ``M_QUANTILE`` groups by equal-probability bins of the
    imbalance distance with ties to the lower bin.  Returns one group per
    cell, ordered by key, carrying moments of the requested estimator and
    of the residual mean difference.
    """
    kwargs = {} if max_assignments is None else {"max_assignments": max_assignments}
    wmat = assignment_matrix(sample.n, n1, **kwargs)
    return _groups_from_wmat(sample, estimator, conditioner, wmat, n_bins)


def _groups_from_wmat(
    sample: Sample,
    estimator: str,
    conditioner: str,
    wmat: np.ndarray,
    n_bins: int,
) -> list[ConditionalGroup]:
    design = CenteredDesign.from_covariates(sample.z)
    n1 = int(wmat[0].sum())
    tau = sample.tau

    # Residual mean difference of the control-outcome projection; with a
    # constant effect this is the stochastic part shared by both
    # estimators.
    eps = fit_projection(sample.y0, design).residuals
    w = wmat.astype(float)
    n0 = sample.n - n1
    eps_diff = (w @ eps) / n1 - (np.sum(eps) - w @ eps) / n0

    estimates = _estimator_values(sample, design, wmat, estimator)
    delta = _batch.delta_matrix(wmat, design)
    m_values = _batch.mahalanobis_from_delta(delta, design, n1)

    if conditioner == "EXACT_DELTA":
        _, codes = np.unique(sample.z, axis=0, return_inverse=True)
        onehot = np.zeros((sample.n, codes.max() + 1))
        onehot[np.arange(sample.n), codes] = 1.0
        counts = np.rint(w @ onehot).astype(int)
        keys = [tuple(row) for row in counts]
    elif conditioner == "M_QUANTILE":
        bins = _batch.quantile_bins(m_values, n_bins)
        keys = [(int(b),) for b in bins]
    else:
        raise ValueError(f"unknown conditioner {conditioner!r}")

    order: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        order.setdefault(key, []).append(i)

    groups = []
    for key in sorted(order):
        idx = np.asarray(order[key])
        groups.append(
            ConditionalGroup(
                key=key,
                mean_delta=delta[idx].mean(axis=0),
                mean_mahalanobis=float(m_values[idx].mean()),
                size=len(idx),
                estimator=_moments(estimates[idx], tau),
                eps_diff=_moments(eps_diff[idx], 0.0),
            )
        )
    return groups


def brute_force_conditional(
    sample: Sample,
    estimator: Literal["DM", "OLS_Z"],
    conditioner: Literal["EXACT_DELTA", "M_QUANTILE"],
    a: Assignment,
    n_bins: int = 5,
    max_assignments: Optional[int] = None,
) -> ConditionalGroup:
    """Conditional moments of the group containing a given assignment."""
    groups = conditional_moment_groups(
        sample, a.n1, estimator, conditioner, n_bins, max_assignments
    )
    design = CenteredDesign.from_covariates(sample.z)
    if conditioner == "EXACT_DELTA":
        _, codes = np.unique(sample.z, axis=0, return_inverse=True)
        counts = np.zeros(codes.max() + 1, dtype=int)
        for i in np.flatnonzero(a.w):
            counts[codes[i]] += 1
        key = tuple(counts)
    else:
        wmat = assignment_matrix(sample.n, a.n1)
        m_values = _batch.mahalanobis_from_delta(
            _batch.delta_matrix(wmat, design), design, a.n1
        )
        m_obs = balance_report(design, a).mahalanobis
        edges = np.quantile(m_values, np.arange(1, n_bins) / n_bins)
        key = (int(np.searchsorted(edges, m_obs, side="left")),)
    for group in groups:
        if group.key == key:
            return group
    raise KeyError(f"no conditioning group with key {key}")
