"""Randomization inference for completely randomized experiments.

Estimation, balance diagnostics and hypothesis tests that stay valid
conditional on the covariate imbalance actually observed, including
principal-component covariate selection and an approximate conditional
randomization test, plus a reproducible Monte Carlo harness.
"""

from .balance import (
    BalanceReport,
    ComponentSelection,
    balance_report,
    expected_set_size,
    mahalanobis_between,
    mutz_inequality,
    noncentral_chisq_cdf,
    pca,
    select_components,
)
from .core import (
    Assignment,
    CenteredDesign,
    EnumerationOverflowError,
    LinearProjection,
    RankDeficiencyError,
    Sample,
    enumerate_assignments,
    fit_projection,
)
from .estimators import (
    DegenerateVarianceError,
    EstimatorId,
    InteractedDesign,
    TestResult,
    diff_in_means,
    ols_adjusted,
    ols_interacted,
    t_test,
)
from .fisher import (
    ConditioningSet,
    FisherResult,
    approximate_fisher,
    conditioning_set_exhaustive,
    fisher_exact,
    greedy_pair_switch,
    select_components_fisher,
)
from .oracle import (
    ConditionalMoments,
    DummyDesign,
    brute_force_conditional,
    dummy_conditional_variance,
    dummy_frequencies,
)
from .simulation import (
    SimConfig,
    dgp_heterogeneous,
    dgp_homogeneous,
    random_correlation,
    run_grid,
    run_illustration,
)

__version__ = "0.1.0"
