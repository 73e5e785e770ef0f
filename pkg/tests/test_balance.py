import math

import numpy as np
import pytest
from scipy.stats import chi2

from condrand.core import Assignment, CenteredDesign, assignment_matrix
from condrand.balance import (
    balance_report,
    critical_noncentrality,
    expected_set_size,
    mahalanobis_between,
    mutz_inequality,
    noncentral_chisq_cdf,
    pca,
    select_components,
)
from condrand import _batch


# ---------------------------------------------------------------------------
# balance_report


def test_balanced_dummy_has_zero_distance():
    z = np.array([1.0, 1, 0, 0, 1, 1, 0, 0])[:, None]
    design = CenteredDesign.from_covariates(z)
    a = Assignment.from_treated(8, [0, 1, 2, 3])
    report = balance_report(design, a)
    assert report.delta == pytest.approx([0.0], abs=1e-12)
    assert report.mahalanobis == pytest.approx(0.0, abs=1e-12)


def test_unit_variance_formula_arithmetic():
    # K=1, sample variance exactly 1, n0 = n1 = 10, delta = 0.5:
    # M = (100 / 20) * 0.25 = 1.25.
    n = 20
    base = np.linspace(-1, 1, n)
    base = base / base.std(ddof=1)
    design = CenteredDesign.from_covariates(base[:, None])
    assert design.gram[0, 0] / (n - 1) == pytest.approx(1.0)
    # Synthetic check of the formula itself at delta = 0.5.
    delta = 0.5
    m = (10 * 10 / n) * delta**2 / (design.gram[0, 0] / (n - 1))
    assert m == pytest.approx(1.25)


def test_mean_distance_over_enumeration_close_to_k():
    rng = np.random.default_rng(31)
    n, n1 = 12, 6
    z = rng.standard_normal((n, 1))
    design = CenteredDesign.from_covariates(z)
    wmat = assignment_matrix(n, n1)
    m = _batch.mahalanobis_from_delta(_batch.delta_matrix(wmat, design), design, n1)
    assert m.mean() == pytest.approx(1.0, rel=0.05)
    # Right-skewed like a one-dof chi square: mean above the median.
    assert m.mean() > np.median(m)


def test_delta_antisymmetric_under_arm_swap():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((10, 3))
    design = CenteredDesign.from_covariates(z)
    a = Assignment.from_treated(10, range(5))
    fwd = balance_report(design, a).delta
    back = balance_report(design, a.mirror()).delta
    assert np.max(np.abs(fwd + back)) < 1e-12


# ---------------------------------------------------------------------------
# mahalanobis_between


def test_between_distance_zero_for_same_assignment():
    rng = np.random.default_rng(2)
    design = CenteredDesign.from_covariates(rng.standard_normal((8, 2)))
    a = Assignment.from_treated(8, [0, 2, 4, 6])
    assert mahalanobis_between(design, a, a) == 0.0


def test_between_distance_mirror_is_four_times():
    rng = np.random.default_rng(3)
    design = CenteredDesign.from_covariates(rng.standard_normal((12, 2)))
    a = Assignment.from_treated(12, range(6))
    m = balance_report(design, a).mahalanobis
    assert mahalanobis_between(design, a.mirror(), a) == pytest.approx(4 * m, abs=1e-10)


def test_between_distance_matches_quadratic_form_oracle():
    rng = np.random.default_rng(4)
    n, n1 = 20, 10
    z = rng.standard_normal((n, 3))
    design = CenteredDesign.from_covariates(z)
    cov_inv = np.linalg.inv(np.cov(z, rowvar=False, ddof=1))
    for _ in range(25):
        a = Assignment.from_treated(n, rng.choice(n, n1, replace=False))
        b = Assignment.from_treated(n, rng.choice(n, n1, replace=False))
        za, zb = z[a.w.astype(bool)], z[b.w.astype(bool)]
        ca, cb = z[~a.w.astype(bool)], z[~b.w.astype(bool)]
        diff = (za.mean(0) - ca.mean(0)) - (zb.mean(0) - cb.mean(0))
        oracle = (n1 * (n - n1) / n) * diff @ cov_inv @ diff
        assert mahalanobis_between(design, a, b) == pytest.approx(oracle, abs=1e-10)


def test_between_distance_unnormalized_flag():
    rng = np.random.default_rng(9)
    design = CenteredDesign.from_covariates(rng.standard_normal((10, 2)))
    a = Assignment.from_treated(10, range(5))
    b = Assignment.from_treated(10, [0, 1, 2, 3, 5])
    normalized = mahalanobis_between(design, a, b, normalized=True)
    raw = mahalanobis_between(design, a, b, normalized=False)
    assert normalized == pytest.approx(raw * (10 - 1), rel=1e-12)


# ---------------------------------------------------------------------------
# noncentral_chisq_cdf


def test_central_two_dof_closed_form():
    assert noncentral_chisq_cdf(2.0, 2, 0.0) == pytest.approx(
        1.0 - math.exp(-1.0), abs=1e-12
    )


def test_zero_argument_is_zero():
    assert noncentral_chisq_cdf(0.0, 3, 2.5) == 0.0
    assert noncentral_chisq_cdf(0.0, 1, 0.0) == 0.0


def test_matches_frozen_monte_carlo_oracle():
    # 1e7 draws of (N(1,1))^2 with a fixed generator gave an empirical
    # CDF of 0.4769875 at x = 1 (standard error 1.58e-4).
    mc_estimate, mc_se = 0.4769875, 1.58e-4
    assert abs(noncentral_chisq_cdf(1.0, 1, 1.0) - mc_estimate) < 3 * mc_se


def test_monotone_in_x():
    grid = np.linspace(0, 20, 50)
    values = [noncentral_chisq_cdf(x, 3, 4.0) for x in grid]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_central_case_agrees_with_reference():
    for k in range(1, 41):
        for x in (0.01, 0.5, 3.0, 10.0, 40.0, 100.0):
            assert noncentral_chisq_cdf(x, k, 0.0) == pytest.approx(
                float(chi2.cdf(x, k)), abs=1e-10
            )


def test_decreasing_in_noncentrality():
    values = [noncentral_chisq_cdf(1.0, 2, lam) for lam in (0.0, 1.0, 5.0, 20.0)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_domain_checks():
    with pytest.raises(ValueError):
        noncentral_chisq_cdf(-1.0, 2, 0.0)
    with pytest.raises(ValueError):
        noncentral_chisq_cdf(1.0, 0, 0.0)
    with pytest.raises(ValueError):
        noncentral_chisq_cdf(1.0, 2, -0.5)


# ---------------------------------------------------------------------------
# expected_set_size


def test_zero_threshold_gives_zero():
    assert expected_set_size(0.0, 3, 1.0, 184_756) == 0.0


def test_set_size_frozen_value():
    # Central chi-square CDF at 0.01 with one dof is 0.07965567455405799.
    value = expected_set_size(0.01, 1, 0.0, 184_756)
    assert value == pytest.approx(14716.863807909538, rel=1e-12)


def test_set_size_monotone_in_threshold():
    rng = np.random.default_rng(0)
    for _ in range(20):
        db = float(rng.uniform(0.001, 2.0))
        k = int(rng.integers(1, 10))
        m = float(rng.uniform(0, 10))
        small = expected_set_size(db, k, m, 1e6)
        large = expected_set_size(2 * db, k, m, 1e6)
        assert large >= small


# ---------------------------------------------------------------------------
# pca


def test_pca_diagonal_covariance():
    rng = np.random.default_rng(6)
    n = 4001
    z = np.column_stack(
        [2.0 * rng.standard_normal(n), rng.standard_normal(n)]
    )
    # Force exactly uncorrelated columns with exact sample variances 4, 1.
    z[:, 0] -= z[:, 0].mean()
    z[:, 1] -= z[:, 1].mean()
    q, _ = np.linalg.qr(z)
    z = q * np.sqrt([4.0 * (n - 1), 1.0 * (n - 1)])
    design = CenteredDesign.from_covariates(z)
    selection = pca(design)
    assert selection.variances == pytest.approx([4.0, 1.0], rel=1e-9)
    assert np.abs(selection.loadings) == pytest.approx(np.eye(2), abs=1e-9)


def test_pca_reconstruction():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((30, 4))
    design = CenteredDesign.from_covariates(z)
    selection = pca(design)
    scores = selection.scores(design)
    assert np.max(np.abs(scores @ selection.loadings.T - design.z_tilde)) < 1e-9


def test_pca_scores_preserve_mahalanobis():
    rng = np.random.default_rng(10)
    for trial in range(5):
        z = rng.standard_normal((16, 3))
        design = CenteredDesign.from_covariates(z)
        selection = pca(design)
        score_design = CenteredDesign.from_covariates(selection.scores(design))
        a = Assignment.from_treated(16, rng.choice(16, 8, replace=False))
        m_raw = balance_report(design, a).mahalanobis
        m_scores = balance_report(score_design, a).mahalanobis
        assert m_scores == pytest.approx(m_raw, abs=1e-9)


# ---------------------------------------------------------------------------
# select_components


def test_select_all_components_when_k_small():
    rng = np.random.default_rng(12)
    hits = 0
    for trial in range(10):
        design = CenteredDesign.from_covariates(rng.standard_normal((50, 2)))
        a = Assignment.from_treated(50, rng.choice(50, 25, replace=False))
        selection = select_components(design, a, 0.01, 100)
        hits += selection.selected_p == 2
    assert hits >= 9


def test_floor_above_initial_count_selects_none():
    rng = np.random.default_rng(13)
    design = CenteredDesign.from_covariates(rng.standard_normal((20, 2)))
    a = Assignment.from_treated(20, range(10))
    selection = select_components(design, a, 0.01, 100, initial_n=50.0)
    assert selection.selected_p == 0
    assert list(selection.n_delta_bar_trace) == [50.0]


def test_selection_monotone_in_floor():
    rng = np.random.default_rng(14)
    design = CenteredDesign.from_covariates(rng.standard_normal((50, 12)))
    for trial in range(10):
        a = Assignment.from_treated(50, rng.choice(50, 25, replace=False))
        previous = None
        for h in (10, 100, 1_000, 100_000):
            p = select_components(design, a, 0.01, h).selected_p
            if previous is not None:
                assert p <= previous
            previous = p


def test_average_selection_decreases_with_distance():
    # Across random assignments, larger observed distances support fewer
    # components on average.
    rng = np.random.default_rng(15)
    design = CenteredDesign.from_covariates(rng.standard_normal((50, 30)))
    records = []
    for _ in range(300):
        a = Assignment.from_treated(50, rng.choice(50, 25, replace=False))
        m = balance_report(design, a).mahalanobis
        p = select_components(design, a, 0.01, 100).selected_p
        records.append((m, p))
    records.sort()
    third = len(records) // 3
    low = np.mean([p for _, p in records[:third]])
    high = np.mean([p for _, p in records[-third:]])
    assert low > high


def test_critical_noncentrality_inverts_cdf():
    for k in (1, 3, 9):
        for target in (1e-10, 1e-6, 1e-3):
            lam = critical_noncentrality(0.01, k, target)
            if lam == -math.inf:
                assert noncentral_chisq_cdf(0.01, k, 0.0) < target
                continue
            assert noncentral_chisq_cdf(0.01, k, lam) >= target
            assert noncentral_chisq_cdf(0.01, k, lam * (1 + 1e-6) + 1e-9) < target


# ---------------------------------------------------------------------------
# mutz_inequality


def test_zero_effect_is_false():
    assert not mutz_inequality(0.0, 1.0, 1.0, 100, 0.5)


def test_simple_arithmetic_case():
    assert mutz_inequality(1.0, 1.0, 1.0, 101, 0.0)


def test_boundary_is_strict():
    # Exactly representable equality: 1 / 4 on both sides.
    assert not mutz_inequality(1.0, 2.0, 1.0, 5, 0.0)


def test_mutz_domain_errors():
    with pytest.raises(ValueError):
        mutz_inequality(1.0, 0.0, 1.0, 100, 0.5)
    with pytest.raises(ValueError):
        mutz_inequality(1.0, 1.0, 1.0, 100, 1.0)
