"""Randomization tests: exact, regression-based and conditional-approximate.

The exact test ranks the observed statistic among all assignments under
the sharp null (both potential outcomes equal to the observed one).  The
approximate conditional test restricts the reference set to assignments
whose imbalance is within a small distance of the observed one, built
exhaustively when enumeration is feasible and by repeated greedy
pair-switch searches otherwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from . import _batch
from .balance import ComponentSelection, mahalanobis_between, pca, select_components
from .core import (
    Assignment,
    CenteredDesign,
    EnumerationOverflowError,
    MAX_ENUMERATION,
    assignment_count,
    assignment_index,
    assignment_matrix,
)

__all__ = [
    "ConditioningSet",
    "FisherResult",
    "GreedySearchResult",
    "SetConstruction",
    "approximate_fisher",
    "conditioning_set_exhaustive",
    "fisher_exact",
    "fisher_monte_carlo",
    "greedy_pair_switch",
    "select_components_fisher",
]

# Upper bound on greedy descents per requested member before the search
# gives up and reports a degraded-resolution set.
SEARCH_BUDGET_FACTOR = 50


class SetConstruction(str, enum.Enum):
    EXHAUSTIVE = "EXHAUSTIVE"
    PAIR_SWITCH = "PAIR_SWITCH"


@dataclass(frozen=True, eq=False)
class ConditioningSet:
    """Assignments whose imbalance lies within delta_bar of a reference."""

    reference: Assignment
    members: tuple[Assignment, ...]
    delta_bar: float
    construction: SetConstruction

    def __post_init__(self):
        if self.reference not in self.members:
            raise ValueError("reference assignment must be a member")

    @property
    def size(self) -> int:
        return len(self.members)

    def verify(self, design: CenteredDesign) -> None:
        """Re-check the distance bound for every member."""
        for member in self.members:
            m = mahalanobis_between(design, member, self.reference)
            if m > self.delta_bar + 1e-12:
                raise AssertionError(
                    f"member exceeds the distance bound: {m} > {self.delta_bar}"
                )


@dataclass(frozen=True)
class FisherResult:
    """Rank-based p-value from a randomization reference set."""

    p_value: float
    rank: int
    set_size: int
    statistic: str
    selected_p: Optional[int] = None
    degraded: bool = False

    def __post_init__(self):
        if not 1 <= self.rank <= self.set_size:
            raise ValueError("rank must lie in [1, set_size]")
        if abs(self.p_value - self.rank / self.set_size) > 1e-12:
            raise ValueError("p-value must equal rank / set_size")


def _rank_among(
    abs_stats: np.ndarray,
    ref_position: int,
    ties: Literal["conservative", "ordered"],
    order_keys: Optional[np.ndarray] = None,
) -> int:
    """Rank of the reference statistic, larger magnitudes more extreme.

    ``conservative`` counts every tied statistic as at least as extreme.
    ``ordered`` breaks ties by the provided deterministic keys (falling
    back to array position), producing a strict total order under which
    the p-values over all references are exactly uniform.
    """
    ref_value = abs_stats[ref_position]
    if ties == "conservative":
        return int(np.count_nonzero(abs_stats >= ref_value))
    if ties == "ordered":
        keys = order_keys if order_keys is not None else np.arange(len(abs_stats))
        greater = int(np.count_nonzero(abs_stats > ref_value))
        tied = np.flatnonzero(abs_stats == ref_value)
        before = int(np.count_nonzero(keys[tied] <= keys[ref_position]))
        return greater + before
    raise ValueError(f"unknown tie rule {ties!r}")


def _batch_statistics(
    y: np.ndarray,
    wmat: np.ndarray,
    statistic: str,
    design: Optional[CenteredDesign],
) -> np.ndarray:
    """Per-assignment statistic under the sharp null (y held fixed)."""
    y = np.asarray(y, dtype=float).ravel()
    if statistic == "DM":
        return _batch.batch_dm_sharp(wmat, y)
    if statistic == "OLS":
        if design is None:
            raise ValueError("the regression statistic requires a design")
        return _batch.batch_ols(wmat, design, y, y).estimates
    raise ValueError(f"unknown statistic {statistic!r}")


def fisher_exact(
    y: np.ndarray,
    a: Assignment,
    statistic: Literal["DM", "OLS"] = "DM",
    design: Optional[CenteredDesign] = None,
    ties: Literal["conservative", "ordered"] = "conservative",
    max_assignments: int = MAX_ENUMERATION,
) -> FisherResult:
    """Randomization test over every assignment, sharp null imputation.

    The two-sided p-value is rank / n_A where the rank counts assignments
    with an absolute statistic at least as extreme as the observed one.
    With ``ties="ordered"`` exact ties (mirrored assignments in balanced
    designs, degenerate outcomes) are resolved by enumeration order,
    making the test's p-values over all references a permutation of
    {1/n_A, ..., 1} and the rejection count at any level exactly its
    floor.  The default keeps every tie maximally extreme, which is the
    conservative reading.
    """
    count = assignment_count(a.n, a.n1, max_assignments)
    wmat = assignment_matrix(a.n, a.n1, max_assignments)
    stats = np.abs(_batch_statistics(y, wmat, statistic, design))
    ref_position = assignment_index(a)
    rank = _rank_among(stats, ref_position, ties)
    return FisherResult(
        p_value=rank / count, rank=rank, set_size=count, statistic=statistic
    )


def fisher_monte_carlo(
    y: np.ndarray,
    a: Assignment,
    statistic: Literal["DM", "OLS"] = "DM",
    design: Optional[CenteredDesign] = None,
    draws: int = 999,
    rng: Optional[np.random.Generator] = None,
) -> FisherResult:
    """Monte Carlo randomization test for designs too large to enumerate.

    Samples assignments uniformly and applies the add-one rank rule, so
    the reported p-value is (1 + #{draws at least as extreme}) / (draws + 1).
    """
    rng = np.random.default_rng(rng)
    y = np.asarray(y, dtype=float).ravel()
    wmat = np.zeros((draws, a.n), dtype=bool)
    for i in range(draws):
        treated = rng.choice(a.n, size=a.n1, replace=False)
        wmat[i, treated] = True
    stats = np.abs(_batch_statistics(y, wmat, statistic, design))
    ref_stat = abs(
        float(_batch_statistics(y, a.w.astype(bool)[None, :], statistic, design)[0])
    )
    rank = 1 + int(np.count_nonzero(stats >= ref_stat))
    return FisherResult(
        p_value=rank / (draws + 1), rank=rank, set_size=draws + 1, statistic=statistic
    )


def conditioning_set_exhaustive(
    design: CenteredDesign,
    a: Assignment,
    delta_bar: float,
    max_assignments: int = MAX_ENUMERATION,
) -> ConditioningSet:
    """All assignments within delta_bar of the reference imbalance."""
    try:
        assignment_count(a.n, a.n1, max_assignments)
    except EnumerationOverflowError as exc:
        raise EnumerationOverflowError(
            f"{exc}; build the set by greedy pair-switch sampling instead",
            exc.count,
        ) from exc
    wmat = assignment_matrix(a.n, a.n1, max_assignments)
    # Integer treated counts per distinct covariate row make the
    # imbalance difference cancel exactly for assignments sharing the
    # reference imbalance, so a zero threshold selects exactly them.
    onehot = np.zeros((a.n, design.distinct_rows.shape[0]))
    onehot[np.arange(a.n), design.row_codes] = 1.0
    counts = np.rint(wmat @ onehot).astype(np.int64)
    count_diff = counts - design.treated_counts(a)
    kappa = a.n / (a.n0 * a.n1)
    diff = kappa * (count_diff @ design.distinct_rows)
    m_values = _batch.mahalanobis_from_delta(diff, design, a.n1)
    m_values[~count_diff.any(axis=1)] = 0.0
    member_rows = np.flatnonzero(m_values <= delta_bar)
    members = tuple(
        Assignment(wmat[i].astype(np.uint8), a.n1) for i in member_rows
    )
    return ConditioningSet(
        reference=a,
        members=members,
        delta_bar=delta_bar,
        construction=SetConstruction.EXHAUSTIVE,
    )


@dataclass(frozen=True)
class GreedySearchResult:
    """Outcome of one greedy pair-switch descent."""

    assignment: Assignment
    distances: tuple[float, ...]
    success: bool

    @property
    def final_distance(self) -> float:
        return self.distances[-1]


def greedy_pair_switch(
    design: CenteredDesign,
    start: Assignment,
    reference: Assignment,
    delta_bar: float,
    max_iterations: int = 10_000,
) -> GreedySearchResult:
    """Descend on the between-assignment distance by swapping one pair.

    Every treated/control swap is evaluated each round and the one with
    the largest distance decrease is applied (ties resolved by the lowest
    treated-index, control-index pair); the search stops when no swap
    decreases the distance.  Success means the final distance is within
    ``delta_bar``.  The recorded distance trace is strictly decreasing.
    """
    if start.n != reference.n or start.n1 != reference.n1:
        raise ValueError("start and reference must share n and n1")
    n, n1 = start.n, start.n1
    n0 = n - n1
    z = design.z_tilde
    scale = (n0 * n1 / n) * (n - 1)
    kappa = n / (n0 * n1)

    w = start.w.copy()
    treated = np.flatnonzero(w == 1)
    control = np.flatnonzero(w == 0)
    # Integer treated counts over distinct covariate rows; a zero count
    # difference means the imbalances match exactly, so the distance is
    # reported as exactly zero rather than float residue.
    count_diff = design.treated_counts(start) - design.treated_counts(reference)

    def distance_and_diff():
        if not count_diff.any():
            return 0.0, np.zeros(design.k)
        diff = kappa * (count_diff @ design.distinct_rows)
        return (
            max(0.0, scale * float(diff @ design.solve_gram(diff))),
            diff,
        )

    current, current_diff = distance_and_diff()
    trace = [current]

    for _ in range(max_iterations):
        if current <= delta_bar:
            break
        # Candidate difference vectors for all treated/control swaps:
        # moving treated unit i out and control unit j in shifts the
        # imbalance by kappa * (z_j - z_i).
        zi = z[treated]
        zj = z[control]
        g = design.solve_gram(current_diff)
        a_lin = zi @ g
        b_lin = zj @ g
        gz_t = design.solve_gram(zi.T).T
        gz_c = design.solve_gram(zj.T).T
        qt = np.einsum("ij,ij->i", zi, gz_t)
        qc = np.einsum("ij,ij->i", zj, gz_c)
        cross = zi @ gz_c.T
        quad = qt[:, None] + qc[None, :] - 2.0 * cross
        candidates = (
            current
            + scale * (2.0 * kappa * (b_lin[None, :] - a_lin[:, None]))
            + scale * (kappa**2) * quad
        )
        best_flat = int(np.argmin(candidates))
        best_value = float(candidates.flat[best_flat])
        if best_value >= current - 1e-15 * max(1.0, current):
            break
        i, j = divmod(best_flat, len(control))
        unit_out, unit_in = treated[i], control[j]
        count_diff[design.row_codes[unit_out]] -= 1
        count_diff[design.row_codes[unit_in]] += 1
        new_current, new_diff = distance_and_diff()
        if new_current >= current:
            # The float swap scan promised a decrease the exact
            # recomputation cannot confirm; treat as a local minimum.
            count_diff[design.row_codes[unit_out]] += 1
            count_diff[design.row_codes[unit_in]] -= 1
            break
        w[unit_out] = 0
        w[unit_in] = 1
        treated[i] = unit_in
        control[j] = unit_out
        treated.sort()
        control.sort()
        current, current_diff = new_current, new_diff
        trace.append(current)

    return GreedySearchResult(
        assignment=Assignment(w, n1),
        distances=tuple(trace),
        success=current <= delta_bar,
    )


def _random_assignment(n: int, n1: int, rng: np.random.Generator) -> Assignment:
    treated = rng.choice(n, size=n1, replace=False)
    w = np.zeros(n, dtype=np.uint8)
    w[treated] = 1
    return Assignment(w, n1)


def _prefix_design(design: CenteredDesign, selection: ComponentSelection, p: int) -> CenteredDesign:
    """Design on the first p component scores."""
    scores = selection.scores(design)
    return CenteredDesign.from_covariates(scores[:, :p])


def select_components_fisher(
    design: CenteredDesign,
    a: Assignment,
    delta_bar: float,
    h: int,
    n_s: int = 1_000,
    n_f: int = 20,
    p_start: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> int:
    """Component count for the conditional randomization test.

    Starting from the regression-selection count, runs ``n_s`` greedy
    searches from random starts on the leading components and accepts the
    count when at least ``n_f`` reach the distance threshold; otherwise
    drops one component and retries.  Zero means no usable component set
    was found.
    """
    if n_f > n_s:
        raise ValueError("n_f cannot exceed n_s")
    rng = np.random.default_rng(rng)
    if p_start is None:
        p_start = select_components(design, a, delta_bar, h).selected_p
    selection = pca(design)
    p = min(int(p_start), selection.k)
    while p >= 1:
        prefix = _prefix_design(design, selection, p)
        successes = 0
        for s in range(n_s):
            start = _random_assignment(a.n, a.n1, rng)
            result = greedy_pair_switch(prefix, start, a, delta_bar)
            if result.success:
                successes += 1
            if successes >= n_f:
                break
            # Not enough budget left to reach n_f: stop early.
            if successes + (n_s - s - 1) < n_f:
                break
        if successes >= n_f:
            return p
        p -= 1
    return 0


def _sampled_conditioning_set(
    design: CenteredDesign,
    a: Assignment,
    delta_bar: float,
    h: int,
    rng: np.random.Generator,
) -> tuple[ConditioningSet, bool]:
    """Collect distinct members by greedy descents until h are found."""
    members: dict[bytes, Assignment] = {a.w.tobytes(): a}
    budget = SEARCH_BUDGET_FACTOR * h
    descents = 0
    while len(members) < h and descents < budget:
        start = _random_assignment(a.n, a.n1, rng)
        result = greedy_pair_switch(design, start, a, delta_bar)
        descents += 1
        if result.success:
            members.setdefault(result.assignment.w.tobytes(), result.assignment)
    ordered = tuple(
        members[key] for key in sorted(members, key=lambda b: tuple(np.frombuffer(b, dtype=np.uint8)))
    )
    degraded = len(ordered) < h
    return (
        ConditioningSet(
            reference=a,
            members=ordered,
            delta_bar=delta_bar,
            construction=SetConstruction.PAIR_SWITCH,
        ),
        degraded,
    )


def approximate_fisher(
    y: np.ndarray,
    design: CenteredDesign,
    a: Assignment,
    delta_bar: float,
    h: int = 100,
    n_s: int = 1_000,
    n_f: int = 20,
    rng: Optional[np.random.Generator] = None,
    max_assignments: int = MAX_ENUMERATION,
) -> FisherResult:
    """Conditional randomization test on nearby assignments only.

    When full enumeration is feasible the conditioning set is exact and
    built on the given design.  Otherwise the component count is chosen
    by :func:`select_components_fisher` and members are collected by
    greedy pair-switch descents from random starts until ``h`` distinct
    members are found (or the search budget runs out, which flags the
    result as degraded).  The statistic is the difference in means under
    the sharp null, and the p-value is the reference's rank over the set.
    """
    y = np.asarray(y, dtype=float).ravel()
    rng = np.random.default_rng(rng)
    selected_p: Optional[int] = None
    degraded = False
    try:
        assignment_count(a.n, a.n1, max_assignments)
        feasible = True
    except EnumerationOverflowError:
        feasible = False
    if feasible:
        cset = conditioning_set_exhaustive(design, a, delta_bar, max_assignments)
    else:
        selection = pca(design)
        selected_p = select_components_fisher(
            design, a, delta_bar, h, n_s, n_f, rng=rng
        )
        if selected_p == 0:
            return FisherResult(
                p_value=1.0,
                rank=1,
                set_size=1,
                statistic="DM",
                selected_p=0,
                degraded=True,
            )
        prefix = _prefix_design(design, selection, selected_p)
        cset, degraded = _sampled_conditioning_set(prefix, a, delta_bar, h, rng)

    wmat = np.stack([m.w.astype(bool) for m in cset.members])
    stats = np.abs(_batch_statistics(y, wmat, "DM", None))
    ref_position = cset.members.index(a)
    rank = _rank_among(stats, ref_position, "conservative")
    return FisherResult(
        p_value=rank / cset.size,
        rank=rank,
        set_size=cset.size,
        statistic="DM",
        selected_p=selected_p,
        degraded=degraded,
    )
