"""Figure builders and the deterministic save path.

Every builder returns a matplotlib Figure assembled purely from the
manifest aggregates (raw bin means, no smoothing or recomputation).
Styling is fixed so that rendering the same inputs twice produces
byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .spec import FigureSpec, InputError, load_manifest, require_kind, require_rows

# One fixed color per estimator so multi-panel figures stay consistent.
COLORS = {
    "DM": "#1f77b4",
    "OLS_Z": "#d62728",
    "OLS_X": "#9467bd",
    "PCA_P": "#2ca02c",
    "FISHER_EXACT": "#1f77b4",
    "FISHER_REG": "#d62728",
    "FISHER_APPROX": "#2ca02c",
}

LABELS = {
    "DM": "difference in means",
    "OLS_Z": "adjusted",
    "OLS_X": "interacted",
    "PCA_P": "component-selected",
    "FISHER_EXACT": "exact test",
    "FISHER_REG": "regression test",
    "FISHER_APPROX": "conditional test",
}


def _loaded_inputs(spec: FigureSpec, kind: str) -> list[tuple[str, dict]]:
    loaded = []
    for path in spec.inputs:
        manifest = load_manifest(path)
        require_kind(manifest, kind, path)
        require_rows(manifest, path)
        loaded.append((path, manifest))
    return loaded


def _input_labels(spec: FigureSpec, count: int) -> list[str]:
    labels = spec.style.get("labels")
    if labels and len(labels) == count:
        return list(labels)
    return [f"input {i + 1}" for i in range(count)]


def build_illustration(spec: FigureSpec):
    """Estimate, size, variance and MSE by imbalance percentile."""
    manifest = _loaded_inputs(spec, "illustration")[0][1]
    bins = manifest["bins"]
    alpha = manifest["config"].get("alpha", 0.05)
    panels = [
        ("mean_estimate", "mean estimate"),
        ("size", "rejection rate"),
        ("variance", "variance"),
        ("mse", "mean squared error"),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    for ax, (key, title) in zip(axes.ravel(), panels):
        for name, table in sorted(bins.items()):
            ax.plot(
                table["mean_delta"],
                table[key],
                color=COLORS.get(name, "black"),
                label=LABELS.get(name, name),
                linewidth=1.5,
            )
        if key == "size":
            ax.axhline(alpha, linestyle="--", color="gray", linewidth=1.0)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("covariate mean difference (percentile average)")
    axes[0, 0].legend(fontsize=8, frameon=False)
    unconditional = manifest.get("unconditional", {})
    note = "; ".join(
        f"{LABELS.get(name, name)}: est {values['mean_estimate']:.3f},"
        f" size {values['size']:.3f}"
        for name, values in sorted(unconditional.items())
    )
    fig.text(0.01, 0.01, f"unconditional: {note}", fontsize=7)
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    return fig


def build_mse_by_k(spec: FigureSpec):
    """Unconditional MSE against the number of covariates, one panel per input."""
    loaded = _loaded_inputs(spec, "grid")
    labels = _input_labels(spec, len(loaded))
    fig, axes = plt.subplots(
        1, len(loaded), figsize=(5 * len(loaded), 4), squeeze=False
    )
    for ax, label, (_, manifest) in zip(axes[0], labels, loaded):
        per_k = manifest["per_k"]
        ks = sorted(int(k) for k in per_k)
        estimators = sorted({name for k in per_k.values() for name in k})
        for name in estimators:
            values = [
                per_k[str(k)][name]["unconditional"]["mse"]
                for k in ks
                if name in per_k[str(k)]
            ]
            ax.plot(
                [k for k in ks if name in per_k[str(k)]],
                values,
                marker="o",
                markersize=3,
                color=COLORS.get(name, "black"),
                label=LABELS.get(name, name),
            )
        ax.set_xlabel("number of covariates")
        ax.set_ylabel("mean squared error")
        ax.set_title(label, fontsize=10)
    axes[0, 0].legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return fig


def build_mse_by_m(spec: FigureSpec):
    """MSE by imbalance-distance quintile, panels by covariate count."""
    loaded = _loaded_inputs(spec, "grid")
    labels = _input_labels(spec, len(loaded))
    ks = sorted(int(k) for k in loaded[0][1]["per_k"])
    fig, axes = plt.subplots(
        len(loaded), len(ks), figsize=(3.5 * len(ks), 3.2 * len(loaded)),
        squeeze=False,
    )
    for row, (label, (_, manifest)) in enumerate(zip(labels, loaded)):
        per_k = manifest["per_k"]
        for col, k in enumerate(ks):
            ax = axes[row][col]
            block = per_k.get(str(k), {})
            for name, summary in sorted(block.items()):
                ax.plot(
                    range(1, len(summary["quintiles"]["mse"]) + 1),
                    summary["quintiles"]["mse"],
                    marker="o",
                    markersize=3,
                    color=COLORS.get(name, "black"),
                    label=LABELS.get(name, name),
                )
            ax.set_title(f"{label}, K = {k}", fontsize=9)
            ax.set_xlabel("distance quintile")
            ax.set_ylabel("mean squared error")
    axes[0][0].legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return fig


def build_components(spec: FigureSpec):
    """Average selected component count by distance quintile."""
    loaded = _loaded_inputs(spec, "grid")
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for _, manifest in loaded:
        per_k = manifest["per_k"]
        for k in sorted(int(k) for k in per_k):
            summary = per_k[str(k)].get("PCA_P")
            if summary is None:
                continue
            counts = summary["quintiles"]["mean_selected_p"]
            ax.plot(
                range(1, len(counts) + 1),
                counts,
                marker="o",
                markersize=3,
                label=f"K = {k}",
            )
            drew = True
    if not drew:
        raise InputError(
            "no component-selection aggregates in the inputs "
            "(estimator PCA_P missing)"
        )
    ax.set_xlabel("distance quintile")
    ax.set_ylabel("average selected components")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return fig


def build_fisher_size(spec: FigureSpec):
    """Randomization-test rejection rates by imbalance decile."""
    manifest = _loaded_inputs(spec, "illustration")[0][1]
    fisher = manifest.get("fisher")
    if not fisher:
        raise InputError("input carries no randomization-test aggregates")
    alpha = manifest["config"].get("alpha", 0.05)
    x = fisher["mean_delta"]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for name in ("FISHER_EXACT", "FISHER_REG", "FISHER_APPROX"):
        if name in fisher:
            ax.plot(
                x,
                fisher[name],
                marker="o",
                markersize=3,
                color=COLORS[name],
                label=LABELS[name],
            )
    ax.axhline(alpha, linestyle="--", color="gray", linewidth=1.0)
    ax.set_xlabel("covariate mean difference (decile average)")
    ax.set_ylabel("rejection rate")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return fig


_BUILDERS = {
    "F1_ILLUSTRATION": build_illustration,
    "F2_MSE_K": build_mse_by_k,
    "F3_MSE_BY_M": build_mse_by_m,
    "F4_COMPONENTS": build_components,
    "F5_FISHER_SIZE": build_fisher_size,
}


def render(spec: FigureSpec) -> str:
    """Build the figure and write it; returns the output path.

    PNG output is deterministic as-is; PDF output strips the creation
    date so repeated renders of the same inputs are byte-identical.
    """
    fig = _BUILDERS[spec.figure_id](spec)
    save_kwargs = {"dpi": 120}
    if spec.output.lower().endswith(".pdf"):
        save_kwargs["metadata"] = {"CreationDate": None}
    try:
        fig.savefig(spec.output, **save_kwargs)
    finally:
        plt.close(fig)
    return spec.output
