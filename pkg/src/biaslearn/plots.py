"""Static SVG figures for grid summaries.

Three figure families: per-setting 3x3 accuracy heatmaps over the bias
grid, an interaction plot of label bias crossed with domain bias, and a
dot plot of per-cell accuracy with standard-error bars.  Output is
deterministic: a fixed hash salt pins the SVG element ids and the date
metadata is stripped, so identical summaries yield identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib as mpl
import numpy as np
import pandas as pd
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from .experiment import SUMMARY_COLUMNS
from .model import BiasClass

BIAS_LEVELS = tuple(b.value for b in BiasClass)

_SVG_RC = {
    "svg.hashsalt": "biaslearn",
    "svg.fonttype": "none",
    "font.size": 9.0,
}


def _validate_summary(summary: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in SUMMARY_COLUMNS if c not in summary.columns]
    if missing:
        raise ValueError(f"summary misses columns: {missing}")
    if len(summary) == 0:
        raise ValueError("summary table is empty")
    return summary


def _settings(summary: pd.DataFrame) -> list:
    pairs = summary[["w", "s"]].drop_duplicates().itertuples(index=False)
    return sorted((float(w), float(s)) for w, s in pairs)


def block_average(summary: pd.DataFrame) -> pd.DataFrame:
    """Collapse blocks: mean accuracy per cell plus a combined SE.

    The combined SE treats per-block means as independent, so it is the
    root-sum-square of block SEs divided by the block count; a display
    companion for the dot plot, not an inferential quantity.
    """
    _validate_summary(summary)

    def _agg(group):
        return pd.Series(
            {
                "accuracy": group["mean_accuracy"].mean(),
                "se": float(np.sqrt((group["se"] ** 2).sum()) / len(group)),
            }
        )

    keys = ["domain_bias", "label_bias", "w", "s"]
    out = summary.groupby(keys, sort=False).apply(_agg, include_groups=False)
    return out.reset_index()


def _save(fig: Figure, path: Path) -> None:
    FigureCanvasSVG(fig)
    fig.savefig(path, format="svg", metadata={"Date": None})


def _accuracy_matrix(cells: pd.DataFrame) -> np.ndarray:
    # cells absent from the summary stay NaN and render blank
    grid = np.full((3, 3), np.nan)
    for row in cells.itertuples(index=False):
        i = BIAS_LEVELS.index(row.domain_bias)
        j = BIAS_LEVELS.index(row.label_bias)
        grid[i, j] = row.accuracy
    return grid


def plot_heatmaps(summary: pd.DataFrame, out_dir) -> list:
    """One 3x3 block-averaged accuracy heatmap per (w, s) setting.

    Rows are domain bias, columns label bias, cells annotated to three
    decimals.  Returns the written paths in setting order.
    """
    _validate_summary(summary)
    averaged = block_average(summary)
    out_dir = Path(out_dir)
    paths = []
    with mpl.rc_context(_SVG_RC):
        for w, s in _settings(summary):
            cells = averaged[(averaged.w == w) & (averaged.s == s)]
            grid = _accuracy_matrix(cells)
            fig = Figure(figsize=(4.2, 3.8))
            ax = fig.add_subplot(111)
            im = ax.imshow(
                np.ma.masked_invalid(grid), cmap="viridis", vmin=0.0, vmax=1.0
            )
            for i in range(3):
                for j in range(3):
                    if np.isnan(grid[i, j]):
                        continue
                    lum = im.cmap(im.norm(grid[i, j]))
                    dark = 0.299 * lum[0] + 0.587 * lum[1] + 0.114 * lum[2] < 0.5
                    ax.text(
                        j,
                        i,
                        f"{grid[i, j]:.3f}",
                        ha="center",
                        va="center",
                        color="white" if dark else "black",
                    )
            ax.set_xticks(range(3), BIAS_LEVELS)
            ax.set_yticks(range(3), BIAS_LEVELS)
            ax.set_xlabel("label bias")
            ax.set_ylabel("domain bias")
            ax.set_title(f"mean accuracy, w={w:g}, s={s:g}")
            fig.colorbar(im, ax=ax, fraction=0.046)
            fig.tight_layout()
            path = out_dir / f"heatmap_w{w:g}_s{s:g}.svg"
            _save(fig, path)
            paths.append(path)
    return paths


def plot_interaction(summary: pd.DataFrame, out_dir) -> Path:
    """Label-by-domain interaction panels, one per (w, s) setting.

    Block-averaged accuracy against label bias, one line per domain
    bias level; parallel lines mean no interaction.
    """
    _validate_summary(summary)
    averaged = block_average(summary)
    settings = _settings(summary)
    out_dir = Path(out_dir)
    with mpl.rc_context(_SVG_RC):
        fig = Figure(figsize=(3.2 * len(settings), 3.2))
        axes = fig.subplots(1, len(settings), squeeze=False)[0]
        x = np.arange(3)
        for ax, (w, s) in zip(axes, settings):
            cells = averaged[(averaged.w == w) & (averaged.s == s)]
            for domain in BIAS_LEVELS:
                ys = []
                for lab in BIAS_LEVELS:
                    match = cells[
                        (cells.domain_bias == domain) & (cells.label_bias == lab)
                    ]["accuracy"]
                    ys.append(float(match.iloc[0]) if len(match) else np.nan)
                if np.all(np.isnan(ys)):
                    continue
                ax.plot(x, ys, marker="o", label=f"domain {domain}")
            ax.set_xticks(x, BIAS_LEVELS)
            ax.set_xlabel("label bias")
            ax.set_title(f"w={w:g}, s={s:g}")
            ax.set_ylim(0.0, 1.05)
        axes[0].set_ylabel("mean accuracy")
        axes[-1].legend(fontsize=7, loc="lower left")
        fig.tight_layout()
        path = out_dir / "interaction.svg"
        _save(fig, path)
    return path


def plot_dotplot(summary: pd.DataFrame, out_dir) -> Path:
    """Per-cell accuracy dots with SE bars, one panel per setting."""
    _validate_summary(summary)
    averaged = block_average(summary)
    settings = _settings(summary)
    out_dir = Path(out_dir)
    combos = [(d, l) for d in BIAS_LEVELS for l in BIAS_LEVELS]
    with mpl.rc_context(_SVG_RC):
        fig = Figure(figsize=(3.4 * len(settings), 4.0))
        axes = fig.subplots(1, len(settings), squeeze=False)[0]
        ypos = np.arange(len(combos))[::-1]
        for ax, (w, s) in zip(axes, settings):
            cells = averaged[(averaged.w == w) & (averaged.s == s)]
            accs, ses = [], []
            for d, l in combos:
                row = cells[(cells.domain_bias == d) & (cells.label_bias == l)]
                accs.append(float(row["accuracy"].iloc[0]) if len(row) else np.nan)
                ses.append(float(row["se"].iloc[0]) if len(row) else 0.0)
            ax.errorbar(
                accs, ypos, xerr=ses, fmt="o", markersize=4, capsize=2, linestyle="none"
            )
            for yy, acc in zip(ypos, accs):
                if np.isnan(acc):
                    continue
                ax.annotate(
                    f"{acc:.3f}",
                    (acc, yy),
                    textcoords="offset points",
                    xytext=(0, 5),
                    ha="center",
                    fontsize=6,
                )
            ax.set_yticks(ypos, [f"{d}/{l}" for d, l in combos])
            ax.set_xlabel("mean accuracy")
            ax.set_title(f"w={w:g}, s={s:g}")
            ax.set_xlim(0.0, 1.05)
        fig.tight_layout()
        path = out_dir / "dotplot.svg"
        _save(fig, path)
    return path


def render_all(summary: pd.DataFrame, out_dir) -> list:
    """Write every figure for one summary; returns all paths."""
    paths = plot_heatmaps(summary, out_dir)
    paths.append(plot_interaction(summary, out_dir))
    paths.append(plot_dotplot(summary, out_dir))
    return paths
