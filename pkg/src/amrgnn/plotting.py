"""File-only figures: crack-field snapshots and error bar charts."""
from __future__ import annotations

import csv
import io
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

from .records import Frame, SimulationRecord, atomic_write  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "lines.linewidth": 1.0,
    "image.cmap": "viridis",
}
FIELD_COLORS = {"phi": "#2b8cbe", "u": "#7bccc4", "v": "#08589e"}
# no timestamps or version strings so that identical inputs give identical bytes
PNG_METADATA = {"Software": None}


class UnreadableInput(ValueError):
    pass


def _save(fig, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def _triangulation(frame: Frame) -> mtri.Triangulation:
    # split every leaf into two triangles; hanging nodes are drawn as plain vertices
    c = frame.mesh.cell_corners
    tris = np.concatenate([c[:, [0, 1, 2]], c[:, [0, 2, 3]]])
    p = frame.mesh.positions
    return mtri.Triangulation(p[:, 0], p[:, 1], tris)


def plot_frames(record: SimulationRecord, path: str | os.PathLike, frames: list[int] | None = None,
                field: str = "phi", show_mesh: bool = True) -> list[int]:
    """One panel per requested frame (default: first, middle and last)."""
    n = record.n_frames
    if frames is None:
        frames = sorted({0, n // 2, n - 1})
    frames = [f if f >= 0 else n + f for f in frames]
    if any(not 0 <= f < n for f in frames):
        raise UnreadableInput(f"frame index out of range for a record with {n} frames")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(frames), figsize=(2.6 * len(frames), 2.6), squeeze=False)
        vmin, vmax = (0.0, 1.0) if field == "phi" else (None, None)
        for ax, t in zip(axes[0], frames):
            fr = record.frames[t]
            tri = _triangulation(fr)
            vals = getattr(fr, field)
            im = ax.tripcolor(tri, vals, shading="gouraud", vmin=vmin, vmax=vmax)
            if show_mesh:
                ax.triplot(mtri.Triangulation(tri.x, tri.y, tri.triangles[: fr.mesh.n_cells]),
                           color="k", lw=0.1, alpha=0.3)
            ax.set_aspect("equal")
            ax.set_title(f"t = {t}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=list(axes[0]), shrink=0.8, label=field)
        _save(fig, path)
    return frames


def read_metrics(path: str | os.PathLike) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UnreadableInput(str(exc)) from exc
    need = {"record", "phi_error_pct", "u_error_pct", "v_error_pct"}
    if not rows or not need <= set(rows[0]):
        raise UnreadableInput(f"{path} is not a metrics CSV")
    return rows


def error_table(groups: dict[str, list[dict]]) -> str:
    """Bar-chart data: one row per (group, field) with mean and spread over records."""
    lines = ["group,field,mean_error_pct,min_error_pct,max_error_pct,n_records"]
    for group in sorted(groups):
        rows = [r for r in groups[group] if r["record"] != "mean"]
        for f in ("phi", "u", "v"):
            vals = np.array([float(r[f"{f}_error_pct"]) for r in rows])
            lines.append(f"{group},{f},{float(vals.mean())!r},{float(vals.min())!r},{float(vals.max())!r},{len(vals)}")
    return "\n".join(lines) + "\n"


def plot_error_bars(groups: dict[str, list[dict]], path: str | os.PathLike) -> None:
    """Grouped bars of mean percent error per field, whiskers spanning min to max."""
    names = sorted(groups)
    x = np.arange(len(names))
    width = 0.25
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(names) + 1.5), 2.6))
        for k, f in enumerate(("phi", "u", "v")):
            means, lo, hi = [], [], []
            for g in names:
                vals = np.array([float(r[f"{f}_error_pct"]) for r in groups[g] if r["record"] != "mean"])
                means.append(vals.mean())
                lo.append(vals.mean() - vals.min())
                hi.append(vals.max() - vals.mean())
            ax.bar(x + (k - 1) * width, means, width, yerr=[lo, hi], capsize=2,
                   color=FIELD_COLORS[f], label=f)
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_ylabel("error (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_loss(history: list[tuple[int, float, float]], path: str | os.PathLike) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.4))
        ep = [h[0] for h in history]
        ax.semilogy(ep, [h[1] for h in history], color=FIELD_COLORS["v"])
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        fig.tight_layout()
        _save(fig, path)


def read_loss_csv(path: str | os.PathLike) -> list[tuple[int, float, float]]:
    try:
        with open(path, newline="") as fh:
            return [(int(r["epoch"]), float(r["mean_loss"]), float(r["wall_seconds"])) for r in csv.DictReader(fh)]
    except (OSError, KeyError, ValueError) as exc:
        raise UnreadableInput(f"{path}: {exc}") from exc


def write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write(Path(path), text.encode("utf-8"))
