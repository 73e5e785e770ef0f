"""Data-generating processes and Monte Carlo drivers.

Two drivers: ``run_illustration`` enumerates every assignment of a small
experiment and aggregates estimator behaviour by percentile of the
observed imbalance, and ``run_grid`` sweeps covariate counts with
sampled assignments and aggregates by quintile of the imbalance
distance.  Randomness is split hierarchically by (covariate count,
sample, purpose) so results are bit-identical across runs and thread
counts, and adding an estimator never perturbs existing draws.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.linalg

from . import _batch
from .balance import critical_noncentrality, pca
from .core import (
    Assignment,
    CenteredDesign,
    Sample,
    assignment_count,
    assignment_matrix,
    fit_projection,
)
from .estimators import ols_interacted, InteractedDesign
from .fisher import approximate_fisher, fisher_exact, fisher_monte_carlo

logger = logging.getLogger(__name__)

__all__ = [
    "GridResult",
    "IllustrationResult",
    "RecordRow",
    "SCHEMA_VERSION",
    "SimConfig",
    "dgp_heterogeneous",
    "dgp_homogeneous",
    "random_correlation",
    "run_grid",
    "run_illustration",
    "write_outputs",
]

SCHEMA_VERSION = 1

CSV_HEADER = "sample_id,k,estimator,assignment,estimate,p,M,bin,selected_p"

_REGRESSION_ESTIMATORS = ("OLS_Z", "OLS_X", "PCA_P")
_FISHER_ESTIMATORS = ("FISHER_EXACT", "FISHER_REG", "FISHER_APPROX")
_KNOWN_ESTIMATORS = ("DM",) + _REGRESSION_ESTIMATORS + _FISHER_ESTIMATORS

# Hierarchical stream purposes; adding new purposes at the end keeps all
# existing draws untouched.
_P_COVARIATES = 0
_P_NOISE0 = 1
_P_NOISE1 = 2
_P_CORRELATION = 3
_P_ASSIGNMENTS = 4
_P_FISHER_REFS = 5
_P_FISHER_SEARCH = 6

_ENUM_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _enum_matrix(n: int, n1: int) -> np.ndarray:
    key = (n, n1)
    if key not in _ENUM_CACHE:
        _ENUM_CACHE[key] = assignment_matrix(n, n1)
    return _ENUM_CACHE[key]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class SimConfig:
    """Configuration shared by the simulation drivers.

    ``kind`` picks the driver.  ``assignments_per_sample`` is an integer
    or "ALL" for full enumeration.  ``initial_n_mode`` controls where the
    component-selection count starts: the full number of assignments or
    half of it; the default resolves to FULL for homogeneous effects and
    HALF for heterogeneous ones.  ``null_mode`` sets the tested null to
    zero or to each sample's average treatment effect.
    """

    kind: str = "grid"
    n: int = 50
    n1: int = 25
    k_grid: tuple[int, ...] = (2,)
    replications: int = 200
    assignments_per_sample: int | str = 2_000
    delta_bar: float = 0.01
    h: int = 100
    n_s: int = 1_000
    n_f: int = 20
    dgp: str = "HOMOGENEOUS"
    correlated: bool = False
    effect: float = 0.0
    seed: int = 0
    estimators: tuple[str, ...] = ("DM", "OLS_Z")
    initial_n_mode: str = "AUTO"
    null_mode: str = "ZERO"
    bins: int = 100
    fisher_bins: int = 10
    fisher_refs: int = 100
    fisher_draws: int = 999
    alpha: float = 0.05

    def __post_init__(self):
        if self.kind not in ("illustration", "grid"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if not 1 <= self.n1 < self.n:
            raise ValueError("need 1 <= n1 < n")
        if self.delta_bar <= 0:
            raise ValueError("delta_bar must be positive")
        if self.n_f > self.n_s:
            raise ValueError("n_f cannot exceed n_s")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if isinstance(self.assignments_per_sample, str):
            if self.assignments_per_sample != "ALL":
                raise ValueError("assignments_per_sample must be a count or 'ALL'")
        elif self.assignments_per_sample < 1:
            raise ValueError("assignments_per_sample must be positive")
        if self.dgp not in ("HOMOGENEOUS", "HETEROGENEOUS"):
            raise ValueError(f"unknown dgp {self.dgp!r}")
        if self.initial_n_mode not in ("AUTO", "FULL", "HALF"):
            raise ValueError(f"unknown initial_n_mode {self.initial_n_mode!r}")
        if self.null_mode not in ("ZERO", "SAMPLE_ATE"):
            raise ValueError(f"unknown null_mode {self.null_mode!r}")
        unknown = [e for e in self.estimators if e not in _KNOWN_ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}")
        object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not self.k_grid or min(self.k_grid) < 1:
            raise ValueError("k_grid must list positive covariate counts")

    @property
    def resolved_initial_n_mode(self) -> str:
        if self.initial_n_mode != "AUTO":
            return self.initial_n_mode
        return "FULL" if self.dgp == "HOMOGENEOUS" else "HALF"

    def initial_n(self) -> float:
        total = float(math.comb(self.n, self.n1))
        return total if self.resolved_initial_n_mode == "FULL" else total / 2.0

    @staticmethod
    def from_dict(data: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(SimConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        coerced = dict(data)
        for key in ("k_grid", "estimators"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        return SimConfig(**coerced)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["k_grid"] = list(self.k_grid)
        out["estimators"] = list(self.estimators)
        return out


@dataclass(frozen=True)
class RecordRow:
    """One estimator evaluation for one assignment of one sample."""

    sample_id: int
    k: int
    estimator: str
    assignment: int
    estimate: float
    p: float
    m: float
    bin: int
    selected_p: Optional[int] = None

    def to_csv_line(self) -> str:
        selected = "" if self.selected_p is None else str(self.selected_p)
        return (
            f"{self.sample_id},{self.k},{self.estimator},{self.assignment},"
            f"{self.estimate!r},{self.p!r},{self.m!r},{self.bin},{selected}"
        )


def random_correlation(
    k: int, eta: float = 1.0, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Random correlation matrix from the extended onion construction.

    At eta = 1 the draw is uniform over the space of valid correlation
    matrices.  The matrix is grown one dimension at a time: a beta draw
    fixes the radius of the new row's correlation vector and a uniform
    direction on the sphere fixes its orientation.
    """
    if k < 2:
        raise ValueError("need at least two dimensions")
    rng = np.random.default_rng(rng)
    beta_param = eta + (k - 2) / 2.0
    r = 2.0 * rng.beta(beta_param, beta_param) - 1.0
    corr = np.array([[1.0, r], [r, 1.0]])
    for m in range(2, k):
        beta_param -= 0.5
        radius_sq = rng.beta(m / 2.0, beta_param)
        direction = rng.standard_normal(m)
        direction /= np.linalg.norm(direction)
        w = math.sqrt(radius_sq) * direction
        chol = scipy.linalg.cholesky(corr, lower=True)
        q = chol @ w
        grown = np.empty((m + 1, m + 1))
        grown[:m, :m] = corr
        grown[m, :m] = q
        grown[:m, m] = q
        grown[m, m] = 1.0
        corr = grown
    return corr


def _covariates(
    n: int, k: int, correlated: bool, z_rng: np.random.Generator, c_rng: np.random.Generator
) -> np.ndarray:
    z = z_rng.standard_normal((n, k))
    if correlated and k >= 2:
        corr = random_correlation(k, 1.0, c_rng)
        z = z @ scipy.linalg.cholesky(corr, lower=True).T
    return z


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def dgp_homogeneous(
    n: int, k: int, correlated: bool = False, seed=None
) -> Sample:
    """Sample with equal potential outcomes and a half-explained outcome.

    Covariates are standard normal (optionally with a random correlation
    structure); the outcome adds unit-variance noise to the unit-norm
    linear signal, so the covariates account for about half the outcome
    variance.
    """
    ss = _seed_sequence(seed)
    z_ss, u_ss, c_ss = ss.spawn(3)
    z = _covariates(
        n, k, correlated, np.random.default_rng(z_ss), np.random.default_rng(c_ss)
    )
    b = np.full(k, 1.0 / math.sqrt(k))
    y0 = z @ b + np.random.default_rng(u_ss).standard_normal(n)
    return Sample(z=z, y0=y0, y1=y0.copy())


def dgp_heterogeneous(
    n: int, k: int, gamma: float, correlated: bool = False, seed=None
) -> Sample:
    """Sample whose two potential outcomes carry independent noise.

    Both arms share the covariate signal; the treated outcome adds a
    constant shift plus its own noise draw, so unit-level effects vary
    even when the shift is zero.
    """
    ss = _seed_sequence(seed)
    z_ss, u0_ss, u1_ss, c_ss = ss.spawn(4)
    z = _covariates(
        n, k, correlated, np.random.default_rng(z_ss), np.random.default_rng(c_ss)
    )
    b = np.full(k, 1.0 / math.sqrt(k))
    signal = z @ b
    y0 = signal + np.random.default_rng(u0_ss).standard_normal(n)
    y1 = signal + gamma + np.random.default_rng(u1_ss).standard_normal(n)
    return Sample(z=z, y0=y0, y1=y1)


def _draw_sample(config: SimConfig, k: int, sample_id: int) -> Sample:
    base = np.random.SeedSequence(
        config.seed, spawn_key=(k, sample_id, _P_COVARIATES)
    )
    # The dgp splits its own sub-streams from this sequence.
    if config.dgp == "HOMOGENEOUS":
        sample = dgp_homogeneous(config.n, k, config.correlated, base)
        if config.effect != 0.0:
            sample = Sample(z=sample.z, y0=sample.y0, y1=sample.y0 + config.effect)
        return sample
    return dgp_heterogeneous(config.n, k, config.effect, config.correlated, base)


def _sampled_wmat(config: SimConfig, k: int, sample_id: int) -> tuple[np.ndarray, bool]:
    """Assignment rows for one sample; bool flag marks full enumeration."""
    if config.assignments_per_sample == "ALL":
        return _enum_matrix(config.n, config.n1), True
    rng = _rng(config.seed, k, sample_id, _P_ASSIGNMENTS)
    draws = int(config.assignments_per_sample)
    order = np.argsort(rng.random((draws, config.n)), axis=1)
    treated = order[:, : config.n1]
    wmat = np.zeros((draws, config.n), dtype=bool)
    rows = np.repeat(np.arange(draws), config.n1)
    wmat[rows, treated.ravel()] = True
    return wmat, False


# --------------------------------------------------------------------------
# Illustration driver: full enumeration, aggregates by imbalance percentile.


@dataclass
class _BinTable:
    """Accumulates per-bin means across samples (equal sample weights)."""

    count: np.ndarray
    mean_delta: np.ndarray
    mean_estimate: np.ndarray
    size: np.ndarray
    variance: np.ndarray
    mse: np.ndarray

    @staticmethod
    def zeros(n_bins: int) -> "_BinTable":
        z = lambda: np.zeros(n_bins)
        return _BinTable(z(), z(), z(), z(), z(), z())

    def add(self, other: "_BinTable") -> None:
        for name in ("count", "mean_delta", "mean_estimate", "size", "variance", "mse"):
            getattr(self, name).__iadd__(getattr(other, name))

    def averaged(self, replications: int) -> dict:
        r = float(replications)
        return {
            "count": (self.count / r).tolist(),
            "mean_delta": (self.mean_delta / r).tolist(),
            "mean_estimate": (self.mean_estimate / r).tolist(),
            "size": (self.size / r).tolist(),
            "variance": (self.variance / r).tolist(),
            "mse": (self.mse / r).tolist(),
        }


def _bin_table(
    bins: np.ndarray, n_bins: int, delta: np.ndarray, estimates: np.ndarray,
    rejects: np.ndarray, tau: float,
) -> _BinTable:
    table = _BinTable.zeros(n_bins)
    for b in range(n_bins):
        idx = bins == b
        count = int(np.count_nonzero(idx))
        table.count[b] = count
        if count == 0:
            continue
        est = estimates[idx]
        table.mean_delta[b] = delta[idx].mean()
        table.mean_estimate[b] = est.mean()
        table.size[b] = rejects[idx].mean()
        table.variance[b] = est.var()
        table.mse[b] = np.mean((est - tau) ** 2)
    return table


@dataclass
class _IllustrationSampleResult:
    tables: dict
    unconditional: dict
    beta: float
    fisher_bins: Optional[dict]
    fisher_mean_delta: Optional[np.ndarray]
    rows: Optional[list]


def _illustration_worker(args) -> _IllustrationSampleResult:
    config, sample_id, want_rows = args
    k = config.k_grid[0]
    sample = _draw_sample(config, k, sample_id)
    design = CenteredDesign.from_covariates(sample.z)
    wmat = _enum_matrix(config.n, config.n1)
    tau = sample.tau
    null_value = tau if config.null_mode == "SAMPLE_ATE" else 0.0

    delta_mat = _batch.delta_matrix(wmat, design)
    delta = delta_mat[:, 0]
    m_values = _batch.mahalanobis_from_delta(delta_mat, design, config.n1)
    bins = _batch.quantile_bins(delta, config.bins)

    dm_est, dm_se = _batch.batch_dm(wmat, sample.y0, sample.y1)
    dm_p = _batch.two_sided_p(dm_est, dm_se, config.n - 2, null_value)
    ols = _batch.batch_ols(wmat, design, sample.y0, sample.y1)
    ols_p = _batch.two_sided_p(
        ols.estimates, ols.std_errors, config.n - design.k - 2, null_value
    )

    alpha = config.alpha
    tables = {}
    unconditional = {}
    per_estimator = {
        "DM": (dm_est, dm_p),
        "OLS_Z": (ols.estimates, ols_p),
    }
    for name in config.estimators:
        if name not in per_estimator:
            continue
        est, pvals = per_estimator[name]
        rejects = (pvals <= alpha).astype(float)
        tables[name] = _bin_table(bins, config.bins, delta, est, rejects, tau)
        unconditional[name] = np.array(
            [est.mean(), rejects.mean(), est.var(), np.mean((est - tau) ** 2)]
        )

    beta = float(fit_projection(sample.y0, design).beta[0])

    fisher_stats = None
    fisher_mean_delta = None
    fisher_requested = [e for e in config.estimators if e in _FISHER_ESTIMATORS]
    if fisher_requested:
        if not np.array_equal(sample.y0, sample.y1):
            raise ValueError(
                "illustration randomization tests share one null distribution "
                "across references, which requires y1 == y0 (a true sharp "
                "null); use the grid driver for power runs"
            )
        sharp_dm = _batch.batch_dm_sharp(wmat, sample.y0)
        fisher_stats, fisher_mean_delta = _illustration_fisher(
            config, sample_id, design, delta_mat, delta, sharp_dm, ols.estimates
        )
        fisher_stats = {k2: v for k2, v in fisher_stats.items() if k2 in fisher_requested}

    rows = None
    if want_rows:
        rows = []
        for name in config.estimators:
            if name not in per_estimator:
                continue
            est, pvals = per_estimator[name]
            for i in range(len(est)):
                rows.append(
                    RecordRow(
                        sample_id=sample_id,
                        k=k,
                        estimator=name,
                        assignment=i,
                        estimate=float(est[i]),
                        p=float(pvals[i]),
                        m=float(m_values[i]),
                        bin=int(bins[i]),
                    )
                )
    return _IllustrationSampleResult(
        tables=tables,
        unconditional=unconditional,
        beta=beta,
        fisher_bins=fisher_stats,
        fisher_mean_delta=fisher_mean_delta,
        rows=rows,
    )


def _ordered_rejections(abs_stats: np.ndarray, alpha: float) -> np.ndarray:
    """Rejection flags of the rank test evaluated at every reference.

    Ranks form a strict total order (ties broken by enumeration index),
    so exactly floor(alpha * n) references are rejected.
    """
    n = len(abs_stats)
    order = np.lexsort((np.arange(n), -abs_stats))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(1, n + 1)
    return ranks <= alpha * n


def _illustration_fisher(config, sample_id, design, delta_mat, delta, dm_est, ols_est):
    """Per-decile rejection rates for the three randomization tests."""
    n_bins = config.fisher_bins
    deciles = _batch.quantile_bins(delta, n_bins)
    alpha = config.alpha
    abs_dm = np.abs(dm_est)

    out = {}
    mean_delta = np.array(
        [delta[deciles == b].mean() if np.any(deciles == b) else 0.0 for b in range(n_bins)]
    )

    exact_reject = _ordered_rejections(abs_dm, alpha)
    out["FISHER_EXACT"] = np.array(
        [exact_reject[deciles == b].mean() for b in range(n_bins)]
    )
    reg_reject = _ordered_rejections(np.abs(ols_est), alpha)
    out["FISHER_REG"] = np.array(
        [reg_reject[deciles == b].mean() for b in range(n_bins)]
    )

    # Approximate conditional test at stratified reference assignments.
    refs_per_bin = max(1, config.fisher_refs // n_bins)
    rng = _rng(config.seed, config.k_grid[0], sample_id, _P_FISHER_REFS)
    order = np.argsort(delta, kind="stable")
    sorted_delta = delta[order]
    sorted_absdm = abs_dm[order]
    n1, n0, n = config.n1, config.n - config.n1, config.n
    if design.k == 1:
        s2 = design.gram[0, 0] / (n - 1)
        halfwidth = math.sqrt(config.delta_bar * s2 * n / (n0 * n1))
    counts = np.zeros(n_bins)
    rejects = np.zeros(n_bins)
    for b in range(n_bins):
        candidates = np.flatnonzero(deciles == b)
        if candidates.size == 0:
            continue
        take = min(refs_per_bin, candidates.size)
        refs = rng.choice(candidates, size=take, replace=False)
        for ref in refs:
            if design.k == 1:
                lo = np.searchsorted(sorted_delta, delta[ref] - halfwidth, side="left")
                hi = np.searchsorted(sorted_delta, delta[ref] + halfwidth, side="right")
                member_stats = sorted_absdm[lo:hi]
            else:
                diff = delta_mat - delta_mat[ref : ref + 1]
                m = _batch.mahalanobis_from_delta(diff, design, n1)
                member_stats = abs_dm[m <= config.delta_bar]
            h = len(member_stats)
            rank = int(np.count_nonzero(member_stats >= abs_dm[ref]))
            p = rank / h
            counts[b] += 1
            rejects[b] += 1.0 if p <= alpha else 0.0
    out["FISHER_APPROX"] = (counts, rejects)
    return out, mean_delta


@dataclass
class IllustrationResult:
    """Percentile aggregates of estimates, size, variance and MSE."""

    config: SimConfig
    bins: dict
    unconditional: dict
    beta_mean: float
    fisher: Optional[dict] = None

    def to_json_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "kind": "illustration",
            "config": self.config.to_dict(),
            "bins": self.bins,
            "unconditional": self.unconditional,
            "beta_mean": self.beta_mean,
        }
        if self.fisher is not None:
            out["fisher"] = self.fisher
        return out


def _pool_map(worker, args_list, threads: int):
    if threads <= 1:
        for args in args_list:
            yield worker(args)
        return
    with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(worker, args_list, chunksize=1)


def run_illustration(
    config: SimConfig,
    threads: int = 1,
    record_sink: Optional[Callable[[RecordRow], None]] = None,
) -> IllustrationResult:
    """Enumerate a small experiment and aggregate by imbalance percentile.

    Requires full enumeration to be feasible.  Reduction across samples
    is a plain average of per-sample bin summaries, so the result does
    not depend on thread count or completion order.
    """
    if config.kind != "illustration":
        raise ValueError("config.kind must be 'illustration'")
    assignment_count(config.n, config.n1)
    _enum_matrix(config.n, config.n1)  # warm the cache before forking

    args_list = [
        (config, sample_id, record_sink is not None)
        for sample_id in range(config.replications)
    ]
    estimator_names = [e for e in config.estimators if e in ("DM", "OLS_Z")]
    totals = {name: _BinTable.zeros(config.bins) for name in estimator_names}
    unconditional = {name: np.zeros(4) for name in estimator_names}
    beta_sum = 0.0
    fisher_names = [e for e in config.estimators if e in _FISHER_ESTIMATORS]
    fisher_rates = {name: np.zeros(config.fisher_bins) for name in fisher_names}
    approx_counts = np.zeros(config.fisher_bins)
    approx_rejects = np.zeros(config.fisher_bins)
    fisher_delta = np.zeros(config.fisher_bins)

    for result in _pool_map(_illustration_worker, args_list, threads):
        for name in estimator_names:
            totals[name].add(result.tables[name])
            unconditional[name] += result.unconditional[name]
        beta_sum += result.beta
        if result.fisher_bins is not None:
            fisher_delta += result.fisher_mean_delta
            for name in fisher_names:
                value = result.fisher_bins[name]
                if name == "FISHER_APPROX":
                    counts, rejects = value
                    approx_counts += counts
                    approx_rejects += rejects
                else:
                    fisher_rates[name] += value
        if result.rows is not None and record_sink is not None:
            for row in result.rows:
                record_sink(row)

    r = float(config.replications)
    bins_out = {name: totals[name].averaged(config.replications) for name in estimator_names}
    unconditional_out = {
        name: {
            "mean_estimate": unconditional[name][0] / r,
            "size": unconditional[name][1] / r,
            "variance": unconditional[name][2] / r,
            "mse": unconditional[name][3] / r,
        }
        for name in estimator_names
    }
    fisher_out = None
    if fisher_names:
        fisher_out = {"mean_delta": (fisher_delta / r).tolist()}
        for name in fisher_names:
            if name == "FISHER_APPROX":
                rates = np.divide(
                    approx_rejects,
                    approx_counts,
                    out=np.zeros_like(approx_rejects),
                    where=approx_counts > 0,
                )
                fisher_out[name] = rates.tolist()
                fisher_out["FISHER_APPROX_refs"] = approx_counts.tolist()
            else:
                fisher_out[name] = (fisher_rates[name] / r).tolist()
    return IllustrationResult(
        config=config,
        bins=bins_out,
        unconditional=unconditional_out,
        beta_mean=beta_sum / r,
        fisher=fisher_out,
    )


# --------------------------------------------------------------------------
# Grid driver: sampled assignments, aggregates by distance quintile.


@dataclass
class _GridAccumulator:
    """Pooled sufficient statistics per (estimator, quintile bin)."""

    count: np.ndarray
    reject: np.ndarray
    sq_err: np.ndarray
    est_sum: np.ndarray
    m_sum: np.ndarray
    selected_sum: np.ndarray

    @staticmethod
    def zeros(n_bins: int) -> "_GridAccumulator":
        z = lambda: np.zeros(n_bins)
        return _GridAccumulator(z(), z(), z(), z(), z(), z())

    def add(self, other: "_GridAccumulator") -> None:
        for f in dataclasses.fields(self):
            getattr(self, f.name).__iadd__(getattr(other, f.name))

    def summary(self) -> dict:
        total = self.count.sum()
        with np.errstate(invalid="ignore", divide="ignore"):
            per_bin = {
                "count": self.count.tolist(),
                "size": _safe_div(self.reject, self.count),
                "mse": _safe_div(self.sq_err, self.count),
                "mean_estimate": _safe_div(self.est_sum, self.count),
                "mean_m": _safe_div(self.m_sum, self.count),
                "mean_selected_p": _safe_div(self.selected_sum, self.count),
            }
        return {
            "unconditional": {
                "count": int(total),
                "size": float(self.reject.sum() / total),
                "mse": float(self.sq_err.sum() / total),
                "mean_estimate": float(self.est_sum.sum() / total),
                "mean_selected_p": float(self.selected_sum.sum() / total),
            },
            "quintiles": per_bin,
        }


def _safe_div(num: np.ndarray, den: np.ndarray) -> list:
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return out.tolist()


def _pca_thresholds(config: SimConfig, k: int) -> np.ndarray:
    """Critical distance per candidate component count.

    A candidate count passes the selection rule exactly when the distance
    measured on its components stays at or below the threshold; this is
    the root of the set-size calculus and lets the per-assignment
    selection reduce to comparisons.
    """
    target = config.h / config.initial_n()
    return np.array(
        [
            critical_noncentrality(config.delta_bar, p, target)
            for p in range(1, k + 1)
        ]
    )


def _grid_worker(args):
    config, k, sample_id, thresholds, want_rows = args
    sample = _draw_sample(config, k, sample_id)
    design = CenteredDesign.from_covariates(sample.z)
    wmat, enumerated = _sampled_wmat(config, k, sample_id)
    n, n1 = config.n, config.n1
    tau = sample.tau
    null_value = tau if config.null_mode == "SAMPLE_ATE" else 0.0
    alpha = config.alpha

    delta_mat = _batch.delta_matrix(wmat, design)
    m_values = _batch.mahalanobis_from_delta(delta_mat, design, n1)
    bins = _batch.quantile_bins(m_values, 5)

    results: dict[str, tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]] = {}

    if "DM" in config.estimators:
        est, se = _batch.batch_dm(wmat, sample.y0, sample.y1)
        pvals = _batch.two_sided_p(est, se, n - 2, null_value)
        results["DM"] = (est, pvals, None)

    if "OLS_Z" in config.estimators:
        if n <= k + 2:
            logger.warning("skipping OLS_Z at K=%d: requires n > K + 2", k)
        else:
            ols = _batch.batch_ols(wmat, design, sample.y0, sample.y1)
            pvals = _batch.two_sided_p(ols.estimates, ols.std_errors, n - k - 2, null_value)
            results["OLS_Z"] = (ols.estimates, pvals, None)

    if "PCA_P" in config.estimators:
        selection = pca(design)
        prefix = _batch.batch_pca_prefix(
            wmat, selection.scores(design), selection.variances, sample.y0, sample.y1
        )
        fails = prefix.m_prefix[:, 1:] > thresholds[None, :]
        selected = np.where(fails.any(axis=1), fails.argmax(axis=1), k).astype(int)
        rows_idx = np.arange(len(selected))
        est = prefix.estimates[rows_idx, selected]
        se = prefix.std_errors[rows_idx, selected]
        # Zero selected components means the unadjusted estimator, whose
        # test uses the unpooled two-sample variance.
        none_selected = selected == 0
        if np.any(none_selected):
            dm_est, dm_se = _batch.batch_dm(wmat, sample.y0, sample.y1)
            est = np.where(none_selected, dm_est, est)
            se = np.where(none_selected, dm_se, se)
        pvals = _batch.two_sided_p(est, se, n - selected - 2, null_value)
        results["PCA_P"] = (est, pvals, selected)

    if "OLS_X" in config.estimators:
        if n <= 2 * k + 2:
            logger.warning("skipping OLS_X at K=%d: requires n > 2K + 2", k)
        else:
            est = np.empty(wmat.shape[0])
            pvals = np.empty(wmat.shape[0])
            for i in range(wmat.shape[0]):
                a = Assignment(wmat[i].astype(np.uint8), n1)
                xdesign = InteractedDesign.from_design(design, a)
                res = ols_interacted(
                    sample.observed(a), a, xdesign, null_value=null_value
                )
                est[i] = res.estimate
                pvals[i] = res.p_value
            results["OLS_X"] = (est, pvals, None)

    for name in _FISHER_ESTIMATORS:
        if name not in config.estimators:
            continue
        est, pvals, selected = _grid_fisher(
            config, k, sample_id, name, sample, design, wmat, enumerated
        )
        results[name] = (est, pvals, selected)

    accumulators = {}
    rows = [] if want_rows else None
    for name, (est, pvals, selected) in results.items():
        acc = _GridAccumulator.zeros(5)
        rejects = (pvals <= alpha).astype(float)
        sq_err = (est - tau) ** 2
        for b in range(5):
            idx = bins == b
            acc.count[b] = np.count_nonzero(idx)
            acc.reject[b] = rejects[idx].sum()
            acc.sq_err[b] = sq_err[idx].sum()
            acc.est_sum[b] = est[idx].sum()
            acc.m_sum[b] = m_values[idx].sum()
            if selected is not None:
                acc.selected_sum[b] = selected[idx].sum()
        accumulators[name] = acc
        if want_rows:
            for i in range(len(est)):
                rows.append(
                    RecordRow(
                        sample_id=sample_id,
                        k=k,
                        estimator=name,
                        assignment=i,
                        estimate=float(est[i]),
                        p=float(pvals[i]),
                        m=float(m_values[i]),
                        bin=int(bins[i]),
                        selected_p=None if selected is None else int(selected[i]),
                    )
                )
    return k, accumulators, rows


def _grid_fisher(config, k, sample_id, name, sample, design, wmat, enumerated):
    """Randomization-test p-values for each sampled assignment."""
    n, n1 = config.n, config.n1
    feasible = True
    try:
        assignment_count(n, n1)
    except Exception:
        feasible = False
    est, _ = _batch.batch_dm(wmat, sample.y0, sample.y1)
    pvals = np.empty(wmat.shape[0])
    selected = np.zeros(wmat.shape[0]) if name == "FISHER_APPROX" else None
    for i in range(wmat.shape[0]):
        a = Assignment(wmat[i].astype(np.uint8), n1)
        y = sample.observed(a)
        rng = _rng(config.seed, k, sample_id, _P_FISHER_SEARCH, i)
        if name == "FISHER_EXACT":
            if feasible:
                res = fisher_exact(y, a, "DM", ties="ordered")
            else:
                res = fisher_monte_carlo(y, a, "DM", draws=config.fisher_draws, rng=rng)
        elif name == "FISHER_REG":
            if feasible:
                res = fisher_exact(y, a, "OLS", design, ties="ordered")
            else:
                res = fisher_monte_carlo(
                    y, a, "OLS", design, draws=config.fisher_draws, rng=rng
                )
        else:
            res = approximate_fisher(
                y,
                design,
                a,
                config.delta_bar,
                config.h,
                config.n_s,
                config.n_f,
                rng=rng,
            )
            selected[i] = 0 if res.selected_p is None else res.selected_p
        pvals[i] = res.p_value
    return est, pvals, selected


@dataclass
class GridResult:
    """Pooled size/power/MSE aggregates by covariate count and quintile."""

    config: SimConfig
    per_k: dict

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "grid",
            "config": self.config.to_dict(),
            "per_k": self.per_k,
        }


def run_grid(
    config: SimConfig,
    threads: int = 1,
    record_sink: Optional[Callable[[RecordRow], None]] = None,
) -> GridResult:
    """Sweep covariate counts, aggregating by distance quintile.

    Pooled accumulation makes the unconditional figures exact weighted
    means of the per-quintile figures.  Work units are (k, sample) pairs
    whose random streams are fully determined by the configuration, so
    record streams are identical at any thread count.
    """
    if config.kind != "grid":
        raise ValueError("config.kind must be 'grid'")
    if config.assignments_per_sample == "ALL":
        _enum_matrix(config.n, config.n1)

    per_k: dict[int, dict[str, _GridAccumulator]] = {}
    args_list = []
    for k in config.k_grid:
        thresholds = _pca_thresholds(config, k) if "PCA_P" in config.estimators else None
        for sample_id in range(config.replications):
            args_list.append((config, k, sample_id, thresholds, record_sink is not None))

    for k, accumulators, rows in _pool_map(_grid_worker, args_list, threads):
        bucket = per_k.setdefault(k, {})
        for name, acc in accumulators.items():
            if name not in bucket:
                bucket[name] = _GridAccumulator.zeros(5)
            bucket[name].add(acc)
        if rows is not None and record_sink is not None:
            for row in rows:
                record_sink(row)

    summary = {
        str(k): {name: acc.summary() for name, acc in bucket.items()}
        for k, bucket in per_k.items()
    }
    return GridResult(config=config, per_k=summary)


# --------------------------------------------------------------------------
# File outputs.


def _git_blob_sha1(data: bytes) -> str:
    header = f"blob {len(data)}\0".encode()
    return hashlib.sha1(header + data).hexdigest()


def write_outputs(result, csv_path, manifest_path, rows: Iterable[RecordRow]) -> None:
    """Write the record CSV and the aggregate manifest.

    The manifest echoes the configuration and embeds a content hash of
    the CSV bytes (git blob style) so downstream consumers can detect
    stale pairings.
    """
    lines = [CSV_HEADER]
    lines.extend(row.to_csv_line() for row in rows)
    data = ("\n".join(lines) + "\n").encode()
    with open(csv_path, "wb") as f:
        f.write(data)
    manifest = result.to_json_dict()
    manifest["content_hash"] = _git_blob_sha1(data)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
