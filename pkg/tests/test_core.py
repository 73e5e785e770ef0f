import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condrand.core import (
    Assignment,
    CenteredDesign,
    EnumerationOverflowError,
    RankDeficiencyError,
    Sample,
    assignment_count,
    assignment_index,
    assignment_matrix,
    enumerate_assignments,
    fit_projection,
)


# ---------------------------------------------------------------------------
# Domain type invariants


def test_sample_rejects_nonfinite():
    z = np.ones((5, 1))
    y = np.ones(5)
    bad = y.copy()
    bad[2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        Sample(z=z, y0=bad, y1=y)


def test_sample_rejects_tiny_n():
    with pytest.raises(ValueError, match="at least 4"):
        Sample(z=np.ones((3, 1)), y0=np.ones(3), y1=np.ones(3))


def test_sample_tau():
    s = Sample(z=np.arange(4.0)[:, None], y0=np.zeros(4), y1=np.array([1.0, 2, 3, 4]))
    assert s.tau == 2.5


def test_assignment_validates_count():
    with pytest.raises(ValueError, match="expected 3 treated"):
        Assignment(np.array([1, 1, 0, 0]), n1=3)
    with pytest.raises(ValueError, match="binary"):
        Assignment(np.array([2, 0, 0, 1]))
    with pytest.raises(ValueError, match="non-empty"):
        Assignment(np.ones(4))


def test_assignment_equality_and_mirror():
    a = Assignment.from_treated(6, [0, 1, 2])
    b = Assignment(np.array([1, 1, 1, 0, 0, 0]))
    assert a == b and hash(a) == hash(b)
    assert a.mirror() == Assignment.from_treated(6, [3, 4, 5])


# ---------------------------------------------------------------------------
# fit_projection


@pytest.fixture(scope="module")
def gaussian_design():
    rng = np.random.default_rng(20240817)
    z = rng.standard_normal((20, 3))
    y = rng.standard_normal(20)
    return z, y, CenteredDesign.from_covariates(z)


def test_projection_exact_linear_outcome():
    z = np.arange(10.0)[:, None]
    design = CenteredDesign.from_covariates(z)
    proj = fit_projection(z[:, 0], design)
    assert proj.beta == pytest.approx([1.0], abs=1e-12)
    assert np.max(np.abs(proj.residuals)) < 1e-12


def test_projection_constant_outcome():
    rng = np.random.default_rng(1)
    design = CenteredDesign.from_covariates(rng.standard_normal((8, 2)))
    proj = fit_projection(np.full(8, 3.25), design)
    assert proj.alpha == pytest.approx(3.25)
    assert np.max(np.abs(proj.beta)) < 1e-12
    assert np.max(np.abs(proj.residuals)) < 1e-12


def test_projection_matches_extended_precision_oracle(gaussian_design):
    # Expected coefficients recomputed with 60-digit arithmetic from the
    # centered normal equations for this exact seeded draw.
    _, y, design = gaussian_design
    expected_beta = [
        -0.28307419656089755,
        -0.20474867119561975,
        0.41232838201432095,
    ]
    expected_alpha = 0.45761348833820022
    proj = fit_projection(y, design)
    assert proj.beta == pytest.approx(expected_beta, abs=1e-10)
    assert proj.alpha == pytest.approx(expected_alpha, abs=1e-12)


def test_projection_invariants_hold(gaussian_design):
    _, y, design = gaussian_design
    proj = fit_projection(y, design)
    scale = 20 * max(1.0, np.max(np.abs(y)))
    assert abs(math.fsum(proj.residuals)) <= 1e-9 * scale
    assert np.max(np.abs(design.z_tilde.T @ proj.residuals)) <= 1e-9 * scale


def test_projection_shift_moves_only_intercept(gaussian_design):
    _, y, design = gaussian_design
    base = fit_projection(y, design)
    shifted = fit_projection(y + 5.0, design)
    assert shifted.alpha == pytest.approx(base.alpha + 5.0, abs=1e-10)
    assert np.max(np.abs(shifted.beta - base.beta)) < 1e-10
    assert np.max(np.abs(shifted.residuals - base.residuals)) < 1e-10


def test_rank_deficiency_names_columns():
    z = np.ones((10, 2))
    z[:, 0] = np.arange(10.0)
    z[:, 1] = 2.0 * np.arange(10.0)
    with pytest.raises(RankDeficiencyError) as excinfo:
        CenteredDesign.from_covariates(z)
    assert excinfo.value.columns == (0, 1)


# ---------------------------------------------------------------------------
# Enumeration


def test_enumeration_lexicographic_order():
    assignments = list(enumerate_assignments(4, 2))
    treated_sets = [tuple(a.treated) for a in assignments]
    assert treated_sets == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def test_enumeration_count_small():
    assert sum(1 for _ in enumerate_assignments(12, 6)) == 924


def test_enumeration_no_duplicates():
    seen = {a for a in enumerate_assignments(12, 6)}
    assert len(seen) == 924


def test_enumeration_guard():
    with pytest.raises(EnumerationOverflowError) as excinfo:
        assignment_count(28, 14, max_assignments=10_000)
    assert excinfo.value.count == math.comb(28, 14)
    with pytest.raises(EnumerationOverflowError):
        assignment_count(40, 20)


def test_illustration_scale_count():
    assert assignment_count(20, 10) == 184_756


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=12),
    data=st.data(),
)
def test_enumeration_bijection(n, data):
    n1 = data.draw(st.integers(min_value=1, max_value=n - 1))
    assignments = list(enumerate_assignments(n, n1))
    assert len(assignments) == math.comb(n, n1)
    assert len({a for a in assignments}) == len(assignments)
    for a in assignments:
        assert int(a.w.sum()) == n1


def test_assignment_matrix_and_index_agree():
    wmat = assignment_matrix(8, 3)
    for i, a in enumerate(enumerate_assignments(8, 3)):
        assert np.array_equal(wmat[i], a.w.astype(bool))
        assert assignment_index(a) == i
