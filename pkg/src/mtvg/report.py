"""Report rendering: recall tables plus matplotlib figures written to files."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .container import atomic_write
from .evaluation import EvalReport, format_delimited, format_table
from .matching import ScoreMap2D

_PNG_META = {"Software": None}  # keep output bytes independent of the matplotlib version


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata=_PNG_META)
    atomic_write(path, buf.getvalue())
    return path


def plot_recall(rows: Sequence[tuple[str, EvalReport]], path) -> Path:
    """Grouped bars of R1@threshold and AVG, one group per run."""
    ts = sorted(rows[0][1].r1_at)
    columns = [f"R1@{t:g}" for t in ts] + ["AVG"]
    fig = Figure(figsize=(max(4.5, 1.4 * len(rows) + 2.5), 3.4))
    ax = fig.add_subplot()
    width = 0.8 / len(columns)
    x = np.arange(len(rows))
    for k, col in enumerate(columns):
        vals = [100 * (rep.avg if col == "AVG" else rep.r1_at[ts[k]]) for _, rep in rows]
        ax.bar(x + (k - (len(columns) - 1) / 2) * width, vals, width, label=col)
    ax.set_xticks(x, [name for name, _ in rows], rotation=20, ha="right")
    ax.set_ylabel("Rank-1 recall (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8, ncols=len(columns), loc="upper center", bbox_to_anchor=(0.5, 1.18))
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_training(log: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in log]
    fig = Figure(figsize=(4.8, 3.2))
    ax = fig.add_subplot()
    for key, style in (("loss", "-"), ("bce", "--"), ("nce", ":")):
        ax.plot(epochs, [r[key] for r in log], style, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per step")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_score_map(score_map: ScoreMap2D, path, title: str = "",
                   gt_cell: tuple[int, int] | None = None) -> Path:
    """Heatmap over (start clip, end clip); invalid cells left blank."""
    fig = Figure(figsize=(4.2, 3.6))
    ax = fig.add_subplot()
    img = ax.imshow(np.ma.masked_invalid(score_map.values), origin="lower", cmap="viridis",
                    interpolation="nearest")
    fig.colorbar(img, ax=ax, label=f"{score_map.kind} score")
    i, j = np.unravel_index(np.nanargmax(score_map.values), score_map.values.shape)
    ax.plot(j, i, "r+", ms=10, label="argmax")
    if gt_cell is not None:
        ax.plot(gt_cell[1], gt_cell[0], "wx", ms=8, label="ground truth")
    ax.set_xlabel("end clip")
    ax.set_ylabel("start clip")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return _save(fig, Path(path))


def write_report(out_dir, rows: Sequence[tuple[str, EvalReport]], log: Sequence[dict] | None = None,
                 maps: Sequence[tuple[str, ScoreMap2D, tuple[int, int] | None]] = ()) -> list[Path]:
    """Write table.txt, table.tsv and figures into ``out_dir``; return the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if rows:
        atomic_write(out / "table.txt", format_table(rows).encode())
        atomic_write(out / "table.tsv", format_delimited(rows).encode())
        written += [out / "table.txt", out / "table.tsv", plot_recall(rows, out / "recall.png")]
    if log:
        written.append(plot_training(log, out / "training.png"))
    for name, m, gt in maps:
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
        written.append(plot_score_map(m, out / f"map_{safe}.png", title=name, gt_cell=gt))
    return written
