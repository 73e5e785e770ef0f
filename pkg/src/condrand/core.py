"""Domain types and deterministic linear-algebra primitives.

Everything here is immutable after construction and safe to share across
threads.  The two heavy lifters are ``CenteredDesign`` (column-centered
covariates with a cached symmetric factorization of the Gram matrix) and
``enumerate_assignments`` (lexicographic stream of all treatment
assignments for small experiments).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Assignment",
    "CenteredDesign",
    "EnumerationOverflowError",
    "LinearProjection",
    "MAX_ENUMERATION",
    "RankDeficiencyError",
    "Sample",
    "assignment_matrix",
    "enumerate_assignments",
    "fit_projection",
]

# C(30, 15); full enumeration beyond this is refused by default.
MAX_ENUMERATION = 155_117_520

# Relative pivot tolerance below which a Gram matrix is declared
# rank-deficient rather than inverted.
_RANK_TOL = 1e-12


class RankDeficiencyError(ValueError):
    """Raised when a covariate design is numerically rank-deficient."""

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = columns


class EnumerationOverflowError(ValueError):
    """Raised when the number of assignments exceeds the enumeration guard."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def _compensated_column_means(z: np.ndarray) -> np.ndarray:
    """Column means via compensated (exactly rounded) summation."""
    return np.array([math.fsum(col) / len(col) for col in z.T])


@dataclass(frozen=True, eq=False)
class Sample:
    """A fixed finite population: covariates and both potential outcomes.

    The average treatment effect of the sample is ``tau``; it is a fixed
    quantity because both potential outcome vectors are part of the sample.
    """

    z: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2:
            raise ValueError("covariate matrix must be two-dimensional")
        y0 = np.asarray(self.y0, dtype=float).ravel()
        y1 = np.asarray(self.y1, dtype=float).ravel()
        n, k = z.shape
        if n < 4:
            raise ValueError(f"need at least 4 units, got {n}")
        if k < 1:
            raise ValueError("need at least one covariate")
        if y0.shape != (n,) or y1.shape != (n,):
            raise ValueError("potential outcome vectors must have length n")
        for name, arr in (("z", z), ("y0", y0), ("y1", y1)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        object.__setattr__(self, "z", _as_readonly(z))
        object.__setattr__(self, "y0", _as_readonly(y0))
        object.__setattr__(self, "y1", _as_readonly(y1))

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def k(self) -> int:
        return self.z.shape[1]

    @property
    def tau(self) -> float:
        """Sample average treatment effect, mean(y1 - y0)."""
        return float(np.mean(self.y1 - self.y0))

    def observed(self, a: "Assignment") -> np.ndarray:
        """Observed outcome vector under assignment ``a``."""
        w = a.w.astype(bool)
        return np.where(w, self.y1, self.y0)


@dataclass(frozen=True, eq=False)
class Assignment:
    """A binary treatment assignment with a fixed number of treated units."""

    w: np.ndarray
    n1: int = field(default=-1)

    def __post_init__(self):
        w = np.asarray(self.w)
        if w.ndim != 1:
            raise ValueError("assignment vector must be one-dimensional")
        if not np.all((w == 0) | (w == 1)):
            raise ValueError("assignment vector must be binary")
        w = w.astype(np.uint8)
        ones = int(w.sum())
        n1 = ones if self.n1 < 0 else int(self.n1)
        if ones != n1:
            raise ValueError(f"expected {n1} treated units, found {ones}")
        if n1 < 1 or len(w) - n1 < 1:
            raise ValueError("both arms must be non-empty")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "n1", n1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Assignment):
            return NotImplemented
        return self.w.shape == other.w.shape and bool(np.all(self.w == other.w))

    def __hash__(self) -> int:
        return hash(self.w.tobytes())

    @property
    def n(self) -> int:
        return len(self.w)

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def treated(self) -> np.ndarray:
        """Indices of treated units, ascending."""
        return np.flatnonzero(self.w)

    def mirror(self) -> "Assignment":
        """Swap the two arms (only well-formed when n1 == n0)."""
        return Assignment(1 - self.w)

    @staticmethod
    def from_treated(n: int, treated: Sequence[int]) -> "Assignment":
        w = np.zeros(n, dtype=np.uint8)
        w[list(treated)] = 1
        return Assignment(w)


@dataclass(frozen=True, eq=False)
class CenteredDesign:
    """Column-centered covariates with a cached Gram factorization.

    The projection onto the orthogonal complement of the centered columns
    is never materialized; it is applied through two triangular solves
    against the Cholesky factor of the Gram matrix.

    ``row_codes`` maps each unit to its distinct covariate row and
    ``distinct_rows`` holds the centered distinct rows; differences of
    treated-count vectors over distinct rows are integers, which lets
    between-assignment imbalance differences cancel exactly when two
    assignments share an imbalance.
    """

    z_tilde: np.ndarray
    gram: np.ndarray
    gram_inverse: np.ndarray
    row_codes: np.ndarray = field(repr=False, default=None)
    distinct_rows: np.ndarray = field(repr=False, default=None)
    _chol: np.ndarray = field(repr=False, compare=False, default=None)

    @staticmethod
    def from_covariates(z: np.ndarray) -> "CenteredDesign":
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        means = _compensated_column_means(z)
        z_tilde = z - means
        gram = z_tilde.T @ z_tilde
        _check_full_rank(gram)
        chol = scipy.linalg.cholesky(gram, lower=True)
        gram_inverse = scipy.linalg.cho_solve((chol, True), np.eye(gram.shape[0]))
        gram_inverse = (gram_inverse + gram_inverse.T) / 2.0
        _, first_index, codes = np.unique(
            z, axis=0, return_index=True, return_inverse=True
        )
        distinct = z_tilde[np.sort(first_index)]
        # Renumber codes to match the row order of ``distinct``.
        remap = np.empty(len(first_index), dtype=np.int64)
        remap[np.argsort(first_index)] = np.arange(len(first_index))
        codes = remap[codes.ravel()]
        return CenteredDesign(
            z_tilde=_as_readonly(z_tilde),
            gram=_as_readonly(gram),
            gram_inverse=_as_readonly(gram_inverse),
            row_codes=codes,
            distinct_rows=_as_readonly(distinct),
            _chol=_as_readonly(chol),
        )

    @property
    def n(self) -> int:
        return self.z_tilde.shape[0]

    @property
    def k(self) -> int:
        return self.z_tilde.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        """Sample covariance of the covariates, gram / (n - 1)."""
        return self.gram / (self.n - 1)

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (z_tilde' z_tilde) x = rhs through the Cholesky factor."""
        return scipy.linalg.cho_solve((self._chol, True), rhs)

    def residualize(self, v: np.ndarray) -> np.ndarray:
        """Residual of v after projecting onto the centered columns."""
        return v - self.z_tilde @ self.solve_gram(self.z_tilde.T @ v)

    def treated_counts(self, a: "Assignment") -> np.ndarray:
        """Treated units per distinct covariate row (exact integers)."""
        return np.bincount(
            self.row_codes[a.w.astype(bool)], minlength=self.distinct_rows.shape[0]
        )


def _check_full_rank(gram: np.ndarray) -> None:
    eigvals, eigvecs = np.linalg.eigh(gram)
    threshold = _RANK_TOL * float(np.max(np.diag(gram)))
    bad = np.flatnonzero(eigvals <= threshold)
    if bad.size:
        # Columns loading heavily on the near-null eigenvectors.
        loadings = np.max(np.abs(eigvecs[:, bad]), axis=1)
        columns = tuple(int(j) for j in np.flatnonzero(loadings > 1e-6))
        raise RankDeficiencyError(
            "covariate design is rank-deficient; offending columns "
            f"{list(columns)} (smallest eigenvalue {eigvals[0]:.3e})",
            columns=columns,
        )


@dataclass(frozen=True, eq=False)
class LinearProjection:
    """Least-squares projection of an outcome on the covariates.

    Residuals sum to zero and are orthogonal to every centered covariate
    column; both properties are enforced at construction.
    """

    alpha: float
    beta: np.ndarray
    residuals: np.ndarray

    def __post_init__(self):
        beta = _as_readonly(np.asarray(self.beta, dtype=float).ravel())
        resid = _as_readonly(np.asarray(self.residuals, dtype=float).ravel())
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "residuals", resid)

    def validate(self, design: CenteredDesign, scale: float) -> None:
        tol = 1e-9 * scale
        residual_sum = abs(math.fsum(self.residuals))
        if residual_sum > tol:
            raise AssertionError(
                f"residuals do not sum to zero: |sum| = {residual_sum:.3e}"
            )
        ortho = float(np.max(np.abs(design.z_tilde.T @ self.residuals)))
        if ortho > tol:
            raise AssertionError(
                f"residuals not orthogonal to covariates: max |z'e| = {ortho:.3e}"
            )


def fit_projection(outcome: np.ndarray, design: CenteredDesign) -> LinearProjection:
    """Project an outcome vector on the centered covariates.

    Returns the intercept, slope vector and residual vector of the
    least-squares fit.  The slope solves the normal equations against the
    design's Gram matrix; a rank-deficient design raises
    ``RankDeficiencyError`` at design construction.
    """
    y = np.asarray(outcome, dtype=float).ravel()
    if y.shape[0] != design.n:
        raise ValueError(f"outcome length {y.shape[0]} != design n {design.n}")
    y_mean = math.fsum(y) / len(y)
    y_tilde = y - y_mean
    beta = design.solve_gram(design.z_tilde.T @ y_tilde)
    residuals = y_tilde - design.z_tilde @ beta
    # Remove the (tiny) residual mean so the zero-sum invariant holds to
    # full precision regardless of conditioning.
    residuals = residuals - math.fsum(residuals) / len(residuals)
    projection = LinearProjection(alpha=float(y_mean), beta=beta, residuals=residuals)
    scale = len(y) * max(1.0, float(np.max(np.abs(y))))
    projection.validate(design, scale)
    return projection


def heterogeneous_coefficients(
    proj0: LinearProjection, proj1: LinearProjection, n1: int, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Blended slope and slope difference for a pair of arm projections.

    Returns ``(zeta, rho)`` where zeta weights the control-arm slope by the
    treated share and vice versa, and rho is the slope difference.
    """
    n0 = n - n1
    zeta = (n1 / n) * proj0.beta + (n0 / n) * proj1.beta
    rho = proj1.beta - proj0.beta
    return zeta, rho


def enumerate_assignments(
    n: int, n1: int, max_assignments: int = MAX_ENUMERATION
) -> Iterator[Assignment]:
    """Yield every assignment of n1 treated among n units exactly once.

    Assignments are produced in lexicographic order of the treated index
    set, which fixes a deterministic enumeration index for every
    assignment.  Enumeration is refused (with the computed count in the
    error) when the number of assignments exceeds ``max_assignments``.
    """
    count = assignment_count(n, n1, max_assignments)
    del count
    for treated in itertools.combinations(range(n), n1):
        w = np.zeros(n, dtype=np.uint8)
        w[list(treated)] = 1
        yield Assignment(w, n1)


def assignment_count(
    n: int, n1: int, max_assignments: int = MAX_ENUMERATION
) -> int:
    """Number of assignments, after checking the enumeration guard."""
    if n1 < 1 or n1 >= n:
        raise ValueError("need at least one treated and one control unit")
    if n > 30:
        raise EnumerationOverflowError(
            f"full enumeration restricted to n <= 30, got n = {n}", math.comb(n, n1)
        )
    count = math.comb(n, n1)
    if count > max_assignments:
        raise EnumerationOverflowError(
            f"C({n}, {n1}) = {count} exceeds the enumeration guard "
            f"({max_assignments}); use Monte Carlo sampling instead",
            count,
        )
    return count


def assignment_matrix(
    n: int, n1: int, max_assignments: int = MAX_ENUMERATION
) -> np.ndarray:
    """Dense boolean matrix of all assignments, one row per assignment.

    Row order matches ``enumerate_assignments``.  Intended for the
    vectorized enumeration engines; subject to the same guard.
    """
    count = assignment_count(n, n1, max_assignments)
    out = np.zeros((count, n), dtype=bool)
    for i, treated in enumerate(itertools.combinations(range(n), n1)):
        out[i, list(treated)] = True
    return out


def assignment_index(a: Assignment) -> int:
    """Lexicographic enumeration index of an assignment (combinadic rank)."""
    treated = a.treated
    n = a.n
    rank = 0
    prev = -1
    remaining = a.n1
    for pos, idx in enumerate(treated):
        for skipped in range(prev + 1, idx):
            rank += math.comb(n - skipped - 1, remaining - 1)
        prev = idx
        remaining -= 1
    return rank
