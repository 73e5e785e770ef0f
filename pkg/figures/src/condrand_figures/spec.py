"""Figure specifications and input validation.

A figure reads one or more aggregate manifests produced by
``condrand simulate`` (the ``manifest.json`` next to the record CSV);
inputs are validated for existence, schema version and non-emptiness
before any rendering starts, and are never modified.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

EXPECTED_SCHEMA_VERSION = 1

FIGURE_IDS = (
    "F1_ILLUSTRATION",
    "F2_MSE_K",
    "F3_MSE_BY_M",
    "F4_COMPONENTS",
    "F5_FISHER_SIZE",
)


class InputError(Exception):
    """A figure input is missing, malformed or empty."""


@dataclass(frozen=True)
class FigureSpec:
    """What to draw, from which manifests, into which file."""

    figure_id: str
    inputs: tuple[str, ...]
    output: str
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.figure_id not in FIGURE_IDS:
            raise InputError(f"unknown figure id {self.figure_id!r}")
        if not self.inputs:
            raise InputError("at least one input manifest is required")


def resolve_manifest_path(path: str) -> str:
    """Accept either a manifest file or the directory containing one."""
    if os.path.isdir(path):
        return os.path.join(path, "manifest.json")
    return path


def load_manifest(path: str) -> dict:
    """Read and validate one aggregate manifest."""
    resolved = resolve_manifest_path(path)
    if not os.path.exists(resolved):
        raise InputError(f"input not found: {resolved}")
    try:
        with open(resolved) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise InputError(f"{resolved}: invalid JSON: {exc}") from exc
    version = manifest.get("schema_version")
    if version != EXPECTED_SCHEMA_VERSION:
        raise InputError(
            f"{resolved}: schema_version {version!r} does not match the "
            f"expected version {EXPECTED_SCHEMA_VERSION}"
        )
    return manifest


def require_kind(manifest: dict, kind: str, path: str) -> None:
    found = manifest.get("kind")
    if found != kind:
        raise InputError(f"{path}: expected a {kind!r} manifest, found {found!r}")


def require_rows(manifest: dict, path: str) -> None:
    """Reject aggregates that carry no data."""
    if manifest.get("kind") == "illustration":
        bins = manifest.get("bins") or {}
        total = sum(sum(table.get("count", [])) for table in bins.values())
    else:
        per_k = manifest.get("per_k") or {}
        total = sum(
            summary.get("unconditional", {}).get("count", 0)
            for block in per_k.values()
            for summary in block.values()
        )
    if total <= 0:
        raise InputError(f"{path}: no rows")
