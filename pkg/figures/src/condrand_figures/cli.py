"""Standalone entry points, one per figure.

Each script takes ``--in`` (repeatable) and ``--out`` plus an optional
``--label`` per input for panel titles; exit code 0 on success, 2 on
input problems.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .render import render
from .spec import FigureSpec, InputError


def _run(figure_id: str, description: str, argv: Optional[list[str]]) -> int:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument(
        "--in",
        dest="inputs",
        action="append",
        required=True,
        help="aggregate manifest (or the directory holding manifest.json); repeatable",
    )
    parser.add_argument("--out", required=True, help="output image path (.png or .pdf)")
    parser.add_argument(
        "--label",
        dest="labels",
        action="append",
        help="panel label, one per --in",
    )
    args = parser.parse_args(argv)
    style = {}
    if args.labels:
        style["labels"] = args.labels
    try:
        spec = FigureSpec(
            figure_id=figure_id,
            inputs=tuple(args.inputs),
            output=args.out,
            style=style,
        )
        render(spec)
    except InputError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    sys.stdout.write(f"wrote {args.out}\n")
    return 0


def main_illustration(argv: Optional[list[str]] = None) -> int:
    return _run(
        "F1_ILLUSTRATION",
        "Estimate, size, variance and MSE by imbalance percentile.",
        argv,
    )


def main_mse_by_k(argv: Optional[list[str]] = None) -> int:
    return _run(
        "F2_MSE_K",
        "Unconditional MSE against the number of covariates.",
        argv,
    )


def main_mse_by_m(argv: Optional[list[str]] = None) -> int:
    return _run(
        "F3_MSE_BY_M",
        "MSE by imbalance-distance quintile, panels by covariate count.",
        argv,
    )


def main_components(argv: Optional[list[str]] = None) -> int:
    return _run(
        "F4_COMPONENTS",
        "Average selected component count by distance quintile.",
        argv,
    )


def main_fisher_size(argv: Optional[list[str]] = None) -> int:
    return _run(
        "F5_FISHER_SIZE",
        "Randomization-test rejection rates by imbalance decile.",
        argv,
    )


if __name__ == "__main__":  # pragma: no cover
    sys.exit(_run(sys.argv[1], "figure", sys.argv[2:]))
