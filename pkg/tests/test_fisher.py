import math

import numpy as np
import pytest

from condrand.core import (
    Assignment,
    CenteredDesign,
    EnumerationOverflowError,
    assignment_matrix,
    enumerate_assignments,
)
from condrand.balance import mahalanobis_between
from condrand.fisher import (
    ConditioningSet,
    FisherResult,
    SetConstruction,
    approximate_fisher,
    conditioning_set_exhaustive,
    fisher_exact,
    fisher_monte_carlo,
    greedy_pair_switch,
    select_components_fisher,
)


@pytest.fixture(scope="module")
def dummy_design():
    z = np.zeros(10)
    z[:4] = 1.0
    return CenteredDesign.from_covariates(z[:, None])


# ---------------------------------------------------------------------------
# fisher_exact


def test_constant_outcome_gives_p_one():
    a = Assignment.from_treated(8, [0, 1, 2, 3])
    result = fisher_exact(np.ones(8), a)
    assert result.p_value == 1.0
    assert result.set_size == math.comb(8, 4)


def test_engineered_maximum_ties_with_mirror():
    rng = np.random.default_rng(0)
    n, n1 = 10, 5
    y = np.zeros(n)
    y[:n1] = 50.0 + 0.01 * rng.standard_normal(n1)
    a = Assignment.from_treated(n, range(n1))
    result = fisher_exact(y, a, ties="conservative")
    assert result.rank == 2
    assert result.p_value == pytest.approx(2 / math.comb(n, n1))


def test_conservative_is_arm_swap_symmetric():
    rng = np.random.default_rng(1)
    n, n1 = 10, 5
    y = rng.standard_normal(n)
    a = Assignment.from_treated(n, [0, 2, 4, 6, 8])
    p = fisher_exact(y, a, ties="conservative").p_value
    p_mirror = fisher_exact(y, a.mirror(), ties="conservative").p_value
    assert p == p_mirror


def test_ordered_ranks_are_a_permutation():
    rng = np.random.default_rng(2)
    n, n1 = 8, 4
    y = rng.standard_normal(n)
    ranks = [
        fisher_exact(y, a, ties="ordered").rank for a in enumerate_assignments(n, n1)
    ]
    assert sorted(ranks) == list(range(1, math.comb(n, n1) + 1))


def test_ordered_rejection_count_is_exact_floor():
    rng = np.random.default_rng(3)
    n, n1 = 10, 5
    y = rng.standard_normal(n)
    n_a = math.comb(n, n1)
    for alpha in (0.01, 0.05, 0.10):
        rejected = sum(
            fisher_exact(y, a, ties="ordered").p_value <= alpha
            for a in enumerate_assignments(n, n1)
        )
        assert rejected == math.floor(alpha * n_a)


def test_regression_statistic_requires_design():
    a = Assignment.from_treated(8, range(4))
    with pytest.raises(ValueError, match="design"):
        fisher_exact(np.arange(8.0), a, statistic="OLS")


def test_enumeration_guard_redirects():
    a = Assignment.from_treated(40, range(20))
    with pytest.raises(EnumerationOverflowError):
        fisher_exact(np.arange(40.0), a)


def test_monte_carlo_agrees_with_exact_roughly():
    rng = np.random.default_rng(4)
    n, n1 = 12, 6
    z = rng.standard_normal(n)
    y = z + rng.standard_normal(n)
    a = Assignment.from_treated(n, range(6))
    exact = fisher_exact(y, a).p_value
    mc = fisher_monte_carlo(y, a, draws=4_999, rng=rng).p_value
    assert abs(mc - exact) < 0.03


# ---------------------------------------------------------------------------
# conditioning_set_exhaustive


def test_huge_threshold_returns_everything(dummy_design):
    a = Assignment.from_treated(10, [0, 1, 2, 3, 4])
    cset = conditioning_set_exhaustive(dummy_design, a, delta_bar=1e9)
    assert cset.size == math.comb(10, 5)
    assert cset.construction is SetConstruction.EXHAUSTIVE


def test_zero_threshold_exact_combinatorial_size(dummy_design):
    a = Assignment.from_treated(10, [0, 1, 4, 5, 6])  # t = 2 of n_z = 4
    cset = conditioning_set_exhaustive(dummy_design, a, delta_bar=0.0)
    assert cset.size == math.comb(4, 2) * math.comb(6, 3)
    cset.verify(dummy_design)
    for member in cset.members:
        assert mahalanobis_between(dummy_design, member, a) == 0.0


def test_extreme_assignment_may_be_alone():
    rng = np.random.default_rng(5)
    z = np.sort(rng.standard_normal(10))
    design = CenteredDesign.from_covariates(z[:, None])
    # Treat the five largest: the most extreme imbalance attainable.
    a = Assignment.from_treated(10, [5, 6, 7, 8, 9])
    cset = conditioning_set_exhaustive(design, a, delta_bar=1e-6)
    assert cset.size == 1
    assert cset.members[0] == a


def test_reference_must_be_member():
    a = Assignment.from_treated(6, [0, 1, 2])
    other = Assignment.from_treated(6, [3, 4, 5])
    with pytest.raises(ValueError, match="reference"):
        ConditioningSet(
            reference=a,
            members=(other,),
            delta_bar=0.1,
            construction=SetConstruction.EXHAUSTIVE,
        )


# ---------------------------------------------------------------------------
# greedy_pair_switch


def test_start_within_threshold_returns_unchanged(dummy_design):
    a = Assignment.from_treated(10, [0, 1, 4, 5, 6])
    result = greedy_pair_switch(dummy_design, a, a, delta_bar=0.5)
    assert result.assignment == a
    assert result.distances == (0.0,)
    assert result.success


def test_greedy_reaches_exact_match_on_dummy(dummy_design):
    rng = np.random.default_rng(6)
    reference = Assignment.from_treated(10, [0, 1, 4, 5, 6])
    for _ in range(200):
        start = Assignment.from_treated(10, rng.choice(10, 5, replace=False))
        result = greedy_pair_switch(dummy_design, start, reference, delta_bar=0.0)
        assert result.success
        assert result.final_distance == 0.0
        assert mahalanobis_between(dummy_design, result.assignment, reference) == 0.0


def test_greedy_trace_strictly_decreasing():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((30, 3))
    design = CenteredDesign.from_covariates(z)
    reference = Assignment.from_treated(30, rng.choice(30, 15, replace=False))
    for _ in range(50):
        start = Assignment.from_treated(30, rng.choice(30, 15, replace=False))
        result = greedy_pair_switch(design, start, reference, delta_bar=1e-9)
        trace = result.distances
        assert all(b < a for a, b in zip(trace, trace[1:]))


def test_greedy_deterministic_given_start():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((20, 2))
    design = CenteredDesign.from_covariates(z)
    reference = Assignment.from_treated(20, range(10))
    start = Assignment.from_treated(20, rng.choice(20, 10, replace=False))
    first = greedy_pair_switch(design, start, reference, delta_bar=0.01)
    second = greedy_pair_switch(design, start, reference, delta_bar=0.01)
    assert first.assignment == second.assignment
    assert first.distances == second.distances


# ---------------------------------------------------------------------------
# select_components_fisher


def test_zero_start_returns_zero(dummy_design):
    a = Assignment.from_treated(10, [0, 1, 4, 5, 6])
    assert (
        select_components_fisher(
            dummy_design, a, 0.01, 100, p_start=0, rng=np.random.default_rng(0)
        )
        == 0
    )


def test_single_dummy_keeps_one_component(dummy_design):
    a = Assignment.from_treated(10, [0, 1, 4, 5, 6])
    p_f = select_components_fisher(
        dummy_design, a, 0.01, 100, n_s=50, n_f=5, p_start=1,
        rng=np.random.default_rng(1),
    )
    assert p_f == 1


def test_nf_cannot_exceed_ns(dummy_design):
    a = Assignment.from_treated(10, [0, 1, 4, 5, 6])
    with pytest.raises(ValueError):
        select_components_fisher(dummy_design, a, 0.01, 100, n_s=10, n_f=20)


# ---------------------------------------------------------------------------
# approximate_fisher


def test_singleton_set_gives_p_one():
    rng = np.random.default_rng(9)
    z = np.sort(rng.standard_normal(10))
    design = CenteredDesign.from_covariates(z[:, None])
    a = Assignment.from_treated(10, [5, 6, 7, 8, 9])
    y = z + rng.standard_normal(10)
    result = approximate_fisher(y, design, a, delta_bar=1e-6)
    assert result.set_size == 1
    assert result.p_value == 1.0


def test_members_are_distinct_in_sampled_path():
    # Force the sampled path by shrinking the enumeration guard.
    rng = np.random.default_rng(10)
    n, n1 = 16, 8
    z = rng.standard_normal((n, 1))
    design = CenteredDesign.from_covariates(z)
    a = Assignment.from_treated(n, rng.choice(n, n1, replace=False))
    y = z[:, 0] + rng.standard_normal(n)
    result = approximate_fisher(
        y, design, a, delta_bar=0.05, h=25, n_s=200, n_f=5,
        rng=np.random.default_rng(11), max_assignments=100,
    )
    assert result.statistic == "DM"
    assert 1 <= result.rank <= result.set_size


def test_minimum_p_is_one_over_set_size():
    rng = np.random.default_rng(12)
    n, n1 = 12, 6
    z = rng.standard_normal((n, 1))
    design = CenteredDesign.from_covariates(z)
    y = 10.0 * z[:, 0]
    # The assignment treating the largest covariate values maximizes the
    # statistic within any conditioning set that contains it.
    a = Assignment.from_treated(n, np.argsort(z[:, 0])[-n1:])
    result = approximate_fisher(y, design, a, delta_bar=0.4)
    assert result.rank >= 1
    assert result.p_value >= 1.0 / result.set_size


def test_fisher_result_validation():
    with pytest.raises(ValueError):
        FisherResult(p_value=0.5, rank=3, set_size=4, statistic="DM")
    with pytest.raises(ValueError):
        FisherResult(p_value=1.2, rank=5, set_size=4, statistic="DM")


def test_approximate_conditional_size_small_case():
    # Sharp-null rejection rate over all references, pooled across a few
    # samples, should sit near the level like the large-scale pattern.
    rng = np.random.default_rng(13)
    n, n1 = 12, 6
    alpha = 0.05
    rejections, trials = 0, 0
    wmat = assignment_matrix(n, n1)
    for _ in range(6):
        z = rng.standard_normal(n)
        design = CenteredDesign.from_covariates(z[:, None])
        y = z + rng.standard_normal(n)
        for idx in rng.choice(len(wmat), size=40, replace=False):
            a = Assignment(wmat[idx].astype(np.uint8), n1)
            result = approximate_fisher(y, design, a, delta_bar=0.05)
            rejections += result.p_value <= alpha
            trials += 1
    rate = rejections / trials
    assert 0.0 <= rate <= 0.12
