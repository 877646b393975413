"""Bird's-eye-view and report figures rendered to deterministic SVG."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon as PolygonPatch, Rectangle  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import RegionOfInterest  # noqa: E402
from .scene_io import ANCHOR_KINDS, AnchorSet, Scene, atomic_write_text  # noqa: E402

KIND_COLORS = {"oce": "#d62728", "cluster": "#1f77b4", "neighbor": "#2ca02c", "background": "#7f7f7f"}
MAX_PLOT_POINTS = 6000
BEV_MAPPING = ("BEV plot: horizontal axis = LiDAR x (m, forward), vertical axis = LiDAR y (m, left); "
               "z is dropped. Anchors are grouped by kind in <g id=\"anchors-<kind>\">.")

_RC = {
    "svg.hashsalt": "align-qi",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "path.simplify": False,
}


def _svg_text(fig, description: str) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)
    text = buf.getvalue()
    head, sep, rest = text.partition("?>\n")
    if sep:
        return f"{head}{sep}<!-- {description} -->\n{rest}"
    return f"<!-- {description} -->\n{text}"


def bev_figure(scene: Optional[Scene], anchors: Optional[AnchorSet],
               roi: Optional[RegionOfInterest] = None):
    roi = roi or RegionOfInterest()
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 7))
        ax.add_patch(Rectangle((roi.x_min, roi.y_min), roi.x_max - roi.x_min,
                               roi.y_max - roi.y_min, fill=False, lw=1.0, ec="black",
                               gid="roi"))
        if scene is not None and len(scene.points):
            stride = max(1, int(np.ceil(len(scene.points) / MAX_PLOT_POINTS)))
            pts = scene.points[::stride]
            ax.scatter(pts[:, 0], pts[:, 1], s=0.3, c="#bbbbbb", marker=".",
                       linewidths=0, gid="lidar", rasterized=False)
        if scene is not None and scene.ground_truth:
            for k, g in enumerate(scene.ground_truth):
                ax.add_patch(PolygonPatch(g.corners_bev(), closed=True, fill=False,
                                          ec="black", lw=0.6, gid=f"gt-{k}"))
        if anchors is not None:
            for kind in ANCHOR_KINDS:
                pos = anchors.positions((kind,))
                if len(pos):
                    ax.scatter(pos[:, 0], pos[:, 1], s=6, c=KIND_COLORS[kind], marker="o",
                               linewidths=0, label=f"{kind} ({len(pos)})", gid=f"anchors-{kind}")
            if anchors.anchors:
                ax.legend(loc="upper right", frameon=False)
        pad = 2.0
        ax.set_xlim(roi.x_min - pad, roi.x_max + pad)
        ax.set_ylim(roi.y_min - pad, roi.y_max + pad)
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        title = scene.scene_id if scene is not None else (anchors.scene_id if anchors else "")
        ax.set_title(title)
        fig.tight_layout()
    return fig


def plot_bev(scene: Optional[Scene], anchors: Optional[AnchorSet], path,
             roi: Optional[RegionOfInterest] = None) -> Path:
    with plt.rc_context(_RC):
        text = _svg_text(bev_figure(scene, anchors, roi), BEV_MAPPING)
    atomic_write_text(path, text)
    return Path(path)


def plot_report(rep, path) -> Path:
    """Coverage and median OCE centre error per visibility level."""
    levels = [r.level for r in rep.rows]
    cov = [r.coverage for r in rep.rows]
    med = [r.median_err_m if r.median_err_m is not None else np.nan for r in rep.rows]
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
        a1.bar(levels, cov, color="#1f77b4")
        a1.set_ylim(0, 1)
        a1.set_xticks(levels)
        a1.set_xlabel("visibility level")
        a1.set_ylabel("GT coverage")
        a2.bar(levels, med, color="#d62728")
        a2.set_xticks(levels)
        a2.set_xlabel("visibility level")
        a2.set_ylabel("median centre error [m]")
        for ax, vals in ((a1, cov), (a2, med)):
            for x, v in zip(levels, vals):
                if np.isfinite(v):
                    ax.annotate(f"{v:.2f}", (x, v), ha="center", va="bottom", fontsize=7)
        fig.tight_layout()
        text = _svg_text(fig, "Per-level coverage (left) and median OCE centre error (right).")
    atomic_write_text(path, text)
    return Path(path)
