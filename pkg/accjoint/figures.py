"""
Figures - SVG heatmap of posterior correlations and recovery interval plot

Heatmap cells interpolate white -> green for positive mean correlations and
white -> red for negative ones, quantized to 8 bands per sign. Cells flagged
reliable get a black border. Output is byte-stable for fixed input.

Usage:
    from figures import emit_heatmap

    svg = emit_heatmap(summary, blocks=("in", "out"))
"""

import io
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from analysis import CorrelationSummary
from errors import InvalidInputError
from storage import atomic_write

BANDS = 8
WHITE = np.array([1.0, 1.0, 1.0])
GREEN = np.array([0.0, 0.55, 0.0])
RED = np.array([0.80, 0.0, 0.0])

matplotlib.rcParams["svg.hashsalt"] = "accjoint"
matplotlib.rcParams["svg.fonttype"] = "path"


@dataclass(frozen=True)
class HeatmapCell:
    row: int
    col: int
    row_label: str
    col_label: str
    mean: float
    band: int   # -8..8, sign of the correlation
    fill: str   # "#rrggbb"
    border: bool


def band_of(value: float) -> int:
    """Signed band index: round(|value| * 8), clipped to 8"""
    magnitude = min(int(round(abs(value) * BANDS)), BANDS)
    return magnitude if value >= 0 else -magnitude


def band_color(band: int) -> str:
    target = GREEN if band >= 0 else RED
    weight = abs(band) / BANDS
    rgb = (1.0 - weight) * WHITE + weight * target
    return "#{:02x}{:02x}{:02x}".format(*(int(round(c * 255)) for c in rgb))


def _selection(summary: CorrelationSummary, blocks: Optional[Tuple[str, str]]) -> Tuple[List[int], List[int]]:
    if blocks is None:
        every = list(range(summary.dimension))
        return every, every
    rows = summary.block_indices(blocks[0])
    cols = summary.block_indices(blocks[1])
    if not rows or not cols:
        raise InvalidInputError(f"unknown block in {blocks}", blocks=sorted(set(summary.block_labels)))
    return rows, cols


def heatmap_cells(summary: CorrelationSummary, blocks: Optional[Tuple[str, str]] = None) -> List[HeatmapCell]:
    """Cells in row-major order; blocks=(row block, column block) keeps one rectangle"""
    rows, cols = _selection(summary, blocks)
    cells = []
    for r, i in enumerate(rows):
        for c, j in enumerate(cols):
            mean = float(summary.mean[i, j])
            band = band_of(mean)
            cells.append(HeatmapCell(
                row=r,
                col=c,
                row_label=summary.parameter_names[i],
                col_label=summary.parameter_names[j],
                mean=mean,
                band=band,
                fill=band_color(band),
                border=bool(summary.reliable[i, j]),
            ))
    return cells


def _svg(fig: Figure) -> str:
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def emit_heatmap(summary: CorrelationSummary, blocks: Optional[Tuple[str, str]] = None) -> str:
    """SVG document of the correlation heatmap"""
    rows, cols = _selection(summary, blocks)
    cells = heatmap_cells(summary, blocks)
    size = 0.45
    fig = Figure(figsize=(1.5 + size * len(cols), 1.2 + size * len(rows)))
    ax = fig.add_subplot(1, 1, 1)

    for cell in cells:
        ax.add_patch(Rectangle(
            (cell.col, cell.row), 1.0, 1.0,
            facecolor=cell.fill,
            edgecolor="black" if cell.border else "none",
            linewidth=1.5 if cell.border else 0.0,
        ))

    ax.set_xlim(0, len(cols))
    ax.set_ylim(len(rows), 0)
    ax.set_aspect("equal")
    ax.set_xticks(np.arange(len(cols)) + 0.5)
    ax.set_yticks(np.arange(len(rows)) + 0.5)
    ax.set_xticklabels([summary.parameter_names[j] for j in cols], rotation=90, fontsize=7)
    ax.set_yticklabels([summary.parameter_names[i] for i in rows], fontsize=7)
    ax.tick_params(length=0)
    for spine in ax.spines.values():
        spine.set_visible(False)
    if blocks is not None:
        ax.set_ylabel(blocks[0])
        ax.set_xlabel(blocks[1])
    fig.tight_layout()
    return _svg(fig)


def emit_recovery_plot(report: pd.DataFrame, title: Optional[str] = None) -> str:
    """95% intervals per covariance element with the generating value marked"""
    n = len(report)
    fig = Figure(figsize=(7.0, 1.5 + 0.22 * n))
    ax = fig.add_subplot(1, 1, 1)
    y = np.arange(n)

    colors = np.where(report["between"].to_numpy(), "tab:red", "tab:gray")
    for k in range(n):
        ax.plot([report["lo95"].iloc[k], report["hi95"].iloc[k]], [y[k], y[k]], color=colors[k], linewidth=1.5)
    ax.scatter(report["posterior_mean"], y, color="black", s=8, zorder=3, label="posterior mean")
    ax.scatter(report["generating"], y, marker="x", color="tab:blue", s=16, zorder=4, label="generating")
    ax.axvline(0.0, color="black", linewidth=0.5)

    ax.set_yticks(y)
    ax.set_yticklabels(report["element"], fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("covariance")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7, frameon=False)
    fig.tight_layout()
    return _svg(fig)


def write_svg(document: str, path) -> None:
    with atomic_write(path) as handle:
        handle.write(document)


def block_pair(labels: Sequence[str]) -> Optional[Tuple[str, str]]:
    """Between-block rectangle of a two-block design (second block as rows), else None"""
    unique = list(dict.fromkeys(labels))
    if len(unique) != 2:
        return None
    return unique[1], unique[0]
