"""Figure rendering for experiment reports.

Every plot here is a thin view over the delimited tables the analytics
and geometry modules emit — nothing is recomputed. The report path calls
``render_all`` on an experiment directory and drops PNG files next to
the CSVs they were read from, so a directory is always self-describing:
numbers first, pictures second. Rendering never feeds back into any
computation, and the rest of the package imports nothing from here.

Uses the Agg backend unconditionally: reports must render on headless
workers.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

log = logging.getLogger(__name__)

# one stable color per Table-1 group so figures are comparable at a glance
GROUP_COLORS = {
    "clean:clean": "#1f77b4",
    "clean:label_corrupted": "#2ca02c",
    "corrupt:label_corrupted": "#d62728",
    "clean:input_corrupted": "#9467bd",
    "corrupt:input_corrupted": "#8c564b",
    "overall:clean": "#7f7f7f",
    "overall:label_corrupted": "#bcbd22",
    "overall:input_corrupted": "#17becf",
}

KIND_LABELS = {
    "clean": "clean model",
    "label_corrupted": "label-corrupted model",
    "input_corrupted": "input-corrupted model",
}


def _group_color(sample_group: str, model_kind: str) -> str:
    return GROUP_COLORS.get(f"{sample_group}:{model_kind}", "#333333")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    log.info("wrote %s", path)
    return path


def plot_validation_error(val_df: pd.DataFrame, path) -> Path:
    """Final train/validation error against capacity, one line per model kind."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.4), sharex=True)
    for ax, col, title in ((axes[0], "train_error", "final train error"),
                           (axes[1], "val_error", "validation error")):
        for kind, sub in val_df.groupby("model_kind"):
            agg = sub.groupby("capacity")[col].mean()
            ax.plot(agg.index, agg.values, "o-", label=KIND_LABELS.get(kind, kind),
                    color=_group_color("clean", kind))
        ax.set_xscale("log")
        ax.set_xlabel("hidden width")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("error rate")
    axes[1].legend(fontsize=8)
    return _save(fig, path)


def plot_capacity_curves(curves_df: pd.DataFrame, path) -> Path:
    """Mean margin vs capacity per group; across-seed std as a band."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    sub = curves_df[curves_df["sample_group"] != "overall"]
    for (grp, kind), rows in sub.groupby(["sample_group", "model_kind"]):
        rows = rows.sort_values("capacity")
        color = _group_color(grp, kind)
        ax.plot(rows["capacity"], rows["mean"], "o-", color=color,
                label=f"{grp}:{kind}")
        band = rows["std"].to_numpy()
        if np.isfinite(band).all():
            ax.fill_between(rows["capacity"], rows["mean"] - band,
                            rows["mean"] + band, color=color, alpha=0.15)
    ax.set_xscale("log")
    ax.set_xlabel("hidden width")
    ax.set_ylabel("mean margin")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_histograms(hist_df: pd.DataFrame, path) -> Path:
    """Shared-bin margin histograms: capacities as rows, model kinds as columns.

    Within one panel the clean and corrupt groups overlap (density-normalized),
    which is what makes the small-margin mass of corrupted samples visible.
    """
    capacities = sorted(hist_df["capacity"].unique())
    kinds = [k for k in ("clean", "label_corrupted", "input_corrupted")
             if (hist_df["model_kind"] == k).any()]
    fig, axes = plt.subplots(len(capacities), len(kinds),
                             figsize=(3.1 * len(kinds), 2.3 * len(capacities)),
                             sharex=True, squeeze=False)
    for r, cap in enumerate(capacities):
        for c, kind in enumerate(kinds):
            ax = axes[r][c]
            cell = hist_df[(hist_df["capacity"] == cap)
                           & (hist_df["model_kind"] == kind)
                           & (hist_df["sample_group"] != "overall")]
            for grp, rows in cell.groupby("sample_group"):
                # sum counts over seeds, then density-normalize
                binned = rows.groupby(["bin", "bin_left", "bin_right"],
                                      as_index=False)["count"].sum()
                widths = binned["bin_right"] - binned["bin_left"]
                total = binned["count"].sum()
                if total == 0:
                    continue
                dens = binned["count"] / (total * widths)
                ax.bar(binned["bin_left"], dens, width=widths, align="edge",
                       alpha=0.55, color=_group_color(grp, kind), label=grp)
            if r == 0:
                ax.set_title(KIND_LABELS.get(kind, kind), fontsize=9)
            if c == 0:
                ax.set_ylabel(f"width {cap}\ndensity", fontsize=8)
            ax.tick_params(labelsize=7)
            if r == 0 and len(cell):
                ax.legend(fontsize=6)
    for ax in axes[-1]:
        ax.set_xlabel("margin", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_scatter_maxmargin(scatter_df: pd.DataFrame, path) -> Path:
    """Max margin before vs after corruption with the identity line."""
    fig, ax = plt.subplots(figsize=(4.8, 4.6))
    names = {0: ("clean", "#1f77b4", 8), 1: ("label-corrupted", "#d62728", 14),
             2: ("input-corrupted", "#8c564b", 14)}
    for flag, rows in scatter_df.groupby("corruption"):
        name, color, size = names.get(int(flag), (str(flag), "#333333", 8))
        ax.scatter(rows["dist_before"], rows["dist_after"], s=size, alpha=0.5,
                   color=color, label=name, linewidths=0)
    lim = max(scatter_df["dist_before"].max(), scatter_df["dist_after"].max()) * 1.05
    ax.plot([0, lim], [0, lim], "k--", lw=0.8, label="identity")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("max margin before corruption")
    ax.set_ylabel("max margin after corruption")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_distance_heatmap(dist: np.ndarray, row_margins: np.ndarray,
                          col_margins: np.ndarray, path,
                          title: str = "cross-group distances") -> Path:
    """Distance-matrix heatmap with the axis margin curves as marginal plots."""
    fig = plt.figure(figsize=(6.4, 6.0))
    gs = fig.add_gridspec(2, 2, width_ratios=(4.2, 1.0), height_ratios=(1.0, 4.2),
                          hspace=0.06, wspace=0.06)
    ax = fig.add_subplot(gs[1, 0])
    ax_top = fig.add_subplot(gs[0, 0], sharex=ax)
    ax_right = fig.add_subplot(gs[1, 1], sharey=ax)

    im = ax.imshow(dist, aspect="auto", cmap="viridis", origin="upper")
    ax.set_xlabel("columns (sorted by corruption, margin)")
    ax.set_ylabel("rows (sorted by corruption, margin)")
    ax_top.plot(np.arange(len(col_margins)), col_margins, lw=0.9, color="#d62728")
    ax_top.set_ylabel("margin", fontsize=8)
    ax_top.tick_params(labelbottom=False, labelsize=7)
    ax_right.plot(row_margins, np.arange(len(row_margins)), lw=0.9, color="#d62728")
    ax_right.invert_yaxis()
    ax_right.set_xlabel("margin", fontsize=8)
    ax_right.tick_params(labelleft=False, labelsize=7)
    ax_top.set_title(title, fontsize=10)
    fig.colorbar(im, ax=[ax, ax_right], shrink=0.8, pad=0.02,
                 label="Euclidean distance")
    return _save(fig, path)


# ---------------------------------------------------------------------------
# Directory-level entry point used by the report path
# ---------------------------------------------------------------------------

def render_all(exp_dir) -> list[Path]:
    """Render every figure whose backing table exists in `exp_dir`.

    Missing tables are skipped with a log line (a partially-complete
    experiment still gets the figures it can support). Returns the list
    of written files.
    """
    exp_dir = Path(exp_dir)
    written: list[Path] = []

    def table(name: str) -> pd.DataFrame | None:
        p = exp_dir / name
        if not p.exists():
            log.info("skipping figure: %s missing", p.name)
            return None
        return pd.read_csv(p, comment="#")

    val_df = table("val_error.csv")
    if val_df is not None and len(val_df):
        written.append(plot_validation_error(val_df, exp_dir / "fig_val_error.png"))
    curves = table("curves.csv")
    if curves is not None and len(curves):
        written.append(plot_capacity_curves(curves, exp_dir / "fig_curves.png"))
    hists = table("histograms.csv")
    if hists is not None and len(hists):
        written.append(plot_histograms(hists, exp_dir / "fig_histograms.png"))
    scatter = table("scatter_maxmargin.csv")
    if scatter is not None and len(scatter):
        written.append(plot_scatter_maxmargin(scatter,
                                              exp_dir / "fig_scatter_maxmargin.png"))

    bin_path = exp_dir / "distance_matrix.bin"
    axes_df = table("distance_axes.csv")
    if bin_path.exists() and axes_df is not None and len(axes_df):
        from .geometry import load_distance_matrix

        dm = load_distance_matrix(bin_path)
        rows = axes_df[axes_df["axis"] == "row"].sort_values("position")
        cols = axes_df[axes_df["axis"] == "col"].sort_values("position")
        written.append(plot_distance_heatmap(
            dm.entries, rows["margin"].to_numpy(), cols["margin"].to_numpy(),
            exp_dir / "fig_distance_matrix.png"))
    return written
