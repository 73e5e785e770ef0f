"""Command-line interface: analyze a dataset or run a simulation.

Exit codes: 0 on success, 2 on user errors (bad input files, bad
configuration), 3 when an internal guard refuses the request (for
example an enumeration beyond the supported size).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import Optional

import numpy as np

from .balance import balance_report, select_components
from .core import (
    Assignment,
    CenteredDesign,
    EnumerationOverflowError,
    RankDeficiencyError,
    Sample,
)
from .estimators import EstimatorId, diff_in_means, ols_adjusted
from .fisher import approximate_fisher
from .simulation import (
    RecordRow,
    SCHEMA_VERSION,
    SimConfig,
    run_grid,
    run_illustration,
    write_outputs,
)

EXIT_OK = 0
EXIT_USER_ERROR = 2
EXIT_GUARD = 3

# Reductions applied by --scale desk; paper scale leaves the config as is.
DESK_MAX_REPLICATIONS = 200
DESK_MAX_ASSIGNMENTS = 2_000


class UserError(Exception):
    """Input or configuration problem attributable to the caller."""


def _thread_count(value: Optional[int]) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("CONDRAND_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UserError(f"CONDRAND_THREADS is not an integer: {env!r}") from exc
    return os.cpu_count() or 1


def _read_analysis_table(path: str):
    """Read and validate the analysis input table.

    Column layout: outcome, treated, then one column per covariate.
    Raises UserError with the offending row and column on any violation.
    """
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            rows = list(reader)
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise UserError(f"{path}: empty file")
    header = [name.strip() for name in rows[0]]
    if len(header) < 3:
        raise UserError(
            f"{path}: need at least 3 columns (outcome, treated, covariates), "
            f"found {len(header)}"
        )
    if header[0] != "outcome" or header[1] != "treated":
        raise UserError(
            f"{path}: first two columns must be 'outcome' and 'treated', "
            f"found {header[:2]}"
        )
    covariate_names = header[2:]
    y, w, z = [], [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise UserError(
                f"{path}: line {line_no}: expected {len(header)} fields, found {len(row)}"
            )
        parsed = []
        for col_no, cell in enumerate(row, start=1):
            cell = cell.strip()
            if cell == "":
                raise UserError(
                    f"{path}: line {line_no}, column {col_no} "
                    f"({header[col_no - 1]}): missing value"
                )
            try:
                parsed.append(float(cell))
            except ValueError as exc:
                raise UserError(
                    f"{path}: line {line_no}, column {col_no} "
                    f"({header[col_no - 1]}): not a number: {cell!r}"
                ) from exc
        if parsed[1] not in (0.0, 1.0):
            raise UserError(
                f"{path}: line {line_no}, column 2 (treated): must be 0 or 1, "
                f"found {row[1].strip()!r}"
            )
        y.append(parsed[0])
        w.append(int(parsed[1]))
        z.append(parsed[2:])
    return np.asarray(y), np.asarray(w, dtype=np.uint8), np.asarray(z), covariate_names


def _round_sig(x: float, digits: int = 4) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


def _analysis_text(report: dict, covariate_names: list[str]) -> str:
    lines = []
    lines.append(f"units: {report['n']}   treated: {report['n1']}")
    lines.append("")
    lines.append("balance (treated-minus-control means, centered scale):")
    for name, d in zip(covariate_names, report["balance"]["delta"]):
        lines.append(f"  {name}: {_round_sig(d)}")
    lines.append(
        f"imbalance distance: {_round_sig(report['balance']['mahalanobis'])}"
    )
    sel = report["component_selection"]
    lines.append("")
    lines.append(
        f"components selected: {sel['selected_p']} of {len(sel['variances'])}"
    )
    trace = ", ".join(str(_round_sig(v)) for v in sel["n_delta_bar_trace"])
    lines.append(f"expected set-size trace: {trace}")
    lines.append("")
    lines.append("estimates:")
    for entry in report["estimates"]:
        lines.append(
            f"  {entry['estimator']}: {_round_sig(entry['estimate'])}"
            f" (se {_round_sig(entry['std_error'])},"
            f" p {_round_sig(entry['p_value'])})"
        )
    if "fisher" in report:
        fisher = report["fisher"]
        lines.append("")
        lines.append(
            f"conditional randomization test: p {_round_sig(fisher['p_value'])}"
            f" (rank {fisher['rank']} of {fisher['set_size']})"
        )
        if fisher.get("degraded"):
            lines.append(
                "  warning: search budget exhausted before the requested set"
                " size; p-value resolution is degraded"
            )
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    y, w, z, covariate_names = _read_analysis_table(args.input)
    n = len(y)
    if n < 4:
        raise UserError(f"{args.input}: need at least 4 rows, found {n}")
    n1 = int(w.sum())
    if n1 < 1 or n1 >= n:
        raise UserError(f"{args.input}: both arms must be non-empty")
    assignment = Assignment(w)
    design = CenteredDesign.from_covariates(z)
    balance = balance_report(design, assignment)

    rng = np.random.default_rng(args.seed)
    n_assignments = float(math.comb(n, n1))
    selection = select_components(
        design, assignment, args.delta_bar, args.h, n_assignments
    )

    estimates = []
    requested = args.estimator or ["dm", "ols", "pca"]
    if "dm" in requested:
        estimates.append(diff_in_means(y, assignment).to_dict())
    if "ols" in requested:
        estimates.append(ols_adjusted(y, assignment, design).to_dict())
    if "pca" in requested:
        p = selection.selected_p
        if p == 0:
            pca_result = diff_in_means(y, assignment)
            entry = pca_result.to_dict()
            entry["estimator"] = EstimatorId.PCA_P.value
        else:
            scores = selection.scores(design)[:, :p]
            score_design = CenteredDesign.from_covariates(scores)
            entry = ols_adjusted(
                y, assignment, score_design, estimator_id=EstimatorId.PCA_P
            ).to_dict()
        entry["selected_p"] = selection.selected_p
        estimates.append(entry)

    report = {
        "schema_version": SCHEMA_VERSION,
        "n": n,
        "n1": n1,
        "covariates": covariate_names,
        "balance": {
            "delta": balance.delta.tolist(),
            "mahalanobis": balance.mahalanobis,
            "treated_means": balance.treated_means.tolist(),
            "control_means": balance.control_means.tolist(),
            "treated_sds": balance.treated_sds.tolist(),
            "control_sds": balance.control_sds.tolist(),
        },
        "component_selection": {
            "variances": selection.variances.tolist(),
            "selected_p": selection.selected_p,
            "n_delta_bar_trace": selection.n_delta_bar_trace.tolist(),
        },
        "estimates": estimates,
    }
    if args.fisher:
        result = approximate_fisher(
            y, design, assignment, args.delta_bar, args.h, rng=rng
        )
        report["fisher"] = {
            "p_value": result.p_value,
            "rank": result.rank,
            "set_size": result.set_size,
            "statistic": result.statistic,
            "selected_p": result.selected_p,
            "degraded": result.degraded,
        }

    json_path = args.out + ".json"
    text_path = args.out + ".txt"
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    text = _analysis_text(report, covariate_names)
    with open(text_path, "w") as f:
        f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_config(path: str, scale: str) -> SimConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UserError(f"{path}: config must be a JSON object")
    try:
        config = SimConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UserError(f"{path}: {exc}") from exc
    if scale == "desk":
        updates = {}
        if config.replications > DESK_MAX_REPLICATIONS:
            updates["replications"] = DESK_MAX_REPLICATIONS
        if (
            isinstance(config.assignments_per_sample, int)
            and config.assignments_per_sample > DESK_MAX_ASSIGNMENTS
        ):
            updates["assignments_per_sample"] = DESK_MAX_ASSIGNMENTS
        if updates:
            config = SimConfig.from_dict({**config.to_dict(), **updates})
    return config


def cmd_simulate(args) -> int:
    config = _load_config(args.config, args.scale)
    threads = _thread_count(args.threads)
    os.makedirs(args.out, exist_ok=True)
    rows: list[RecordRow] = []
    sink = rows.append
    if config.kind == "illustration":
        result = run_illustration(config, threads=threads, record_sink=sink)
    else:
        result = run_grid(config, threads=threads, record_sink=sink)
    csv_path = os.path.join(args.out, "records.csv")
    manifest_path = os.path.join(args.out, "manifest.json")
    write_outputs(result, csv_path, manifest_path, rows)
    sys.stdout.write(
        f"wrote {len(rows)} records to {csv_path}\n"
        f"wrote aggregates to {manifest_path}\n"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condrand",
        description=(
            "Randomization inference for completely randomized experiments,"
            " conditional on observed covariate imbalance."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser(
        "analyze", help="balance diagnostics and estimates for a dataset"
    )
    analyze.add_argument("input", help="CSV with columns: outcome, treated, covariates")
    analyze.add_argument("--delta-bar", type=float, default=0.01, dest="delta_bar")
    analyze.add_argument("--h", type=int, default=100)
    analyze.add_argument(
        "--estimator",
        action="append",
        choices=["dm", "ols", "pca"],
        help="estimators to report (repeatable; default all)",
    )
    analyze.add_argument(
        "--fisher",
        action="store_true",
        help="also run the approximate conditional randomization test",
    )
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--out", default="analysis", help="output path prefix")
    analyze.add_argument("--threads", type=int, default=None)
    analyze.set_defaults(func=cmd_analyze)

    simulate = sub.add_parser("simulate", help="run a Monte Carlo simulation")
    simulate.add_argument("config", help="JSON simulation configuration")
    simulate.add_argument("--scale", choices=["desk", "paper"], default="desk")
    simulate.add_argument("--out", default="simulation-output", help="output directory")
    simulate.add_argument("--threads", type=int, default=None)
    simulate.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UserError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USER_ERROR
    except EnumerationOverflowError as exc:
        sys.stderr.write(f"refused: {exc}\n")
        return EXIT_GUARD
    except (RankDeficiencyError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
