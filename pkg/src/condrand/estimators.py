"""Point estimators and t-tests for the sample average treatment effect.

Three estimators are provided: the raw difference in arm means, the
regression adjustment on centered covariates, and the fully interacted
regression (covariates plus covariate-by-treatment interactions) with a
heteroskedasticity-robust variance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import t as student_t

from .core import Assignment, CenteredDesign, RankDeficiencyError

__all__ = [
    "DegenerateVarianceError",
    "EstimatorId",
    "InteractedDesign",
    "TestResult",
    "diff_in_means",
    "ols_adjusted",
    "ols_interacted",
    "t_test",
]


class EstimatorId(str, enum.Enum):
    DM = "DM"
    OLS_Z = "OLS_Z"
    OLS_X = "OLS_X"
    PCA_P = "PCA_P"


class DegenerateVarianceError(ValueError):
    """Raised when a variance estimator is undefined (arm too small)."""


@dataclass(frozen=True)
class TestResult:
    """Estimate, standard error and two-sided p-value for one estimator."""

    estimator_id: EstimatorId
    estimate: float
    std_error: float
    p_value: float
    dof: int

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("standard error cannot be negative")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p-value outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator_id.value,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "p_value": self.p_value,
            "dof": self.dof,
        }


def t_test(estimate: float, std_error: float, dof: int, null_value: float = 0.0) -> float:
    """Two-sided p-value from a Student t reference distribution.

    A zero standard error is resolved by convention: p = 1 when the
    estimate equals the null value, p = 0 otherwise.
    """
    if std_error < 0:
        raise ValueError("standard error cannot be negative")
    if dof < 1:
        raise ValueError("degrees of freedom must be at least 1")
    diff = estimate - null_value
    if std_error == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    return float(2.0 * student_t.sf(abs(diff) / std_error, dof))


def diff_in_means(
    y: np.ndarray, a: Assignment, dof: int | None = None, null_value: float = 0.0
) -> TestResult:
    """Difference in arm means with the unpooled two-sample variance."""
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != a.n:
        raise ValueError("outcome length does not match assignment")
    if a.n1 < 2 or a.n0 < 2:
        raise DegenerateVarianceError(
            "arm variances undefined: both arms need at least two units"
        )
    w = a.w.astype(bool)
    y1, y0 = y[w], y[~w]
    estimate = float(y1.mean() - y0.mean())
    variance = y1.var(ddof=1) / a.n1 + y0.var(ddof=1) / a.n0
    std_error = math.sqrt(max(0.0, float(variance)))
    dof = a.n - 2 if dof is None else dof
    return TestResult(
        estimator_id=EstimatorId.DM,
        estimate=estimate,
        std_error=std_error,
        p_value=t_test(estimate, std_error, dof, null_value),
        dof=dof,
    )


def ols_adjusted(
    y: np.ndarray,
    a: Assignment,
    design: CenteredDesign,
    dof: int | None = None,
    null_value: float = 0.0,
    estimator_id: EstimatorId = EstimatorId.OLS_Z,
) -> TestResult:
    """Treatment coefficient from regressing y on an intercept, W and Z.

    The standard error comes from the homoskedastic OLS covariance.  The
    regression is solved through the design's Gram factorization, so a
    rank-deficient covariate set fails at design construction; a
    treatment indicator collinear with the covariates fails here.
    """
    y = np.asarray(y, dtype=float).ravel()
    n, k = design.n, design.k
    if y.shape[0] != n or a.n != n:
        raise ValueError("outcome, assignment and design disagree on n")
    if n <= k + 2:
        raise RankDeficiencyError(
            f"regression needs n > K + 2 (n = {n}, K = {k})"
        )
    w_tilde = a.w.astype(float) - a.n1 / n
    arms = a.n0 * a.n1 / n
    zw = design.z_tilde.T @ a.w.astype(float)
    zy = design.z_tilde.T @ y
    den = arms - float(zw @ design.solve_gram(zw))
    if den <= 1e-12 * arms:
        raise RankDeficiencyError(
            "treatment indicator is collinear with the covariates"
        )
    num = float(w_tilde @ y) - float(zw @ design.solve_gram(zy))
    estimate = num / den
    y_tilde = y - y.mean()
    rss = float(y_tilde @ y_tilde) - float(zy @ design.solve_gram(zy)) - num * num / den
    rss = max(0.0, rss)
    sigma2 = rss / (n - k - 2)
    std_error = math.sqrt(sigma2 / den)
    dof = (n - k - 2) if dof is None else dof
    return TestResult(
        estimator_id=estimator_id,
        estimate=estimate,
        std_error=std_error,
        p_value=t_test(estimate, std_error, dof, null_value),
        dof=dof,
    )


@dataclass(frozen=True, eq=False)
class InteractedDesign:
    """Centered covariates and centered covariate-by-treatment columns.

    ``x_tilde`` stacks the centered covariates with the column-centered
    interactions.  The three stored blocks partition the inverse of
    x_tilde' x_tilde / (n - 1); reassembling them reproduces the full
    inverse, which the tests verify against a direct inversion.
    """

    x_tilde: np.ndarray
    sigma11_inv: np.ndarray
    sigma12_inv: np.ndarray
    sigma22_inv: np.ndarray
    assignment: Assignment

    @staticmethod
    def from_design(design: CenteredDesign, a: Assignment) -> "InteractedDesign":
        n, k = design.n, design.k
        if a.n != n:
            raise ValueError("assignment and design disagree on n")
        if n <= 2 * k + 2:
            raise RankDeficiencyError(
                f"interacted regression needs n > 2K + 2 (n = {n}, K = {k})"
            )
        q = design.z_tilde * a.w.astype(float)[:, None]
        q_tilde = q - q.mean(axis=0)
        x_tilde = np.hstack([design.z_tilde, q_tilde])
        gram = x_tilde.T @ x_tilde
        try:
            inverse = np.linalg.inv(gram)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(
                f"interacted design is rank-deficient: {exc}"
            ) from exc
        scaled = (n - 1) * inverse
        return InteractedDesign(
            x_tilde=x_tilde,
            sigma11_inv=scaled[:k, :k],
            sigma12_inv=scaled[:k, k:],
            sigma22_inv=scaled[k:, k:],
            assignment=a,
        )

    @property
    def n(self) -> int:
        return self.x_tilde.shape[0]

    @property
    def k(self) -> int:
        return self.x_tilde.shape[1] // 2

    def inverse_gram(self) -> np.ndarray:
        """Reassemble (x_tilde' x_tilde)^-1 from the partition blocks."""
        top = np.hstack([self.sigma11_inv, self.sigma12_inv])
        bottom = np.hstack([self.sigma12_inv.T, self.sigma22_inv])
        return np.vstack([top, bottom]) / (self.n - 1)


def ols_interacted(
    y: np.ndarray,
    a: Assignment,
    xdesign: InteractedDesign,
    dof: int | None = None,
    null_value: float = 0.0,
) -> TestResult:
    """Treatment coefficient from the fully interacted regression.

    Regresses y on an intercept, the treatment indicator, the centered
    covariates and their interactions with treatment; reports the HC0
    heteroskedasticity-robust standard error.
    """
    y = np.asarray(y, dtype=float).ravel()
    n, k = xdesign.n, xdesign.k
    if y.shape[0] != n or a.n != n:
        raise ValueError("outcome, assignment and design disagree on n")
    design_matrix = np.column_stack(
        [np.ones(n), a.w.astype(float), xdesign.x_tilde]
    )
    q_mat, r_mat = np.linalg.qr(design_matrix)
    diag = np.abs(np.diag(r_mat))
    if np.any(diag <= 1e-10 * diag.max()):
        raise RankDeficiencyError("interacted regression matrix is rank-deficient")
    coef = np.linalg.solve(r_mat, q_mat.T @ y)
    residuals = y - design_matrix @ coef
    r_inv = np.linalg.inv(r_mat)
    xtx_inv = r_inv @ r_inv.T
    meat = design_matrix.T @ (design_matrix * (residuals**2)[:, None])
    robust = xtx_inv @ meat @ xtx_inv
    estimate = float(coef[1])
    std_error = math.sqrt(max(0.0, float(robust[1, 1])))
    dof = (n - 2 * k - 2) if dof is None else dof
    return TestResult(
        estimator_id=EstimatorId.OLS_X,
        estimate=estimate,
        std_error=std_error,
        p_value=t_test(estimate, std_error, dof, null_value),
        dof=dof,
    )
