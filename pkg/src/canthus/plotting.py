"""Detection overlays and evaluation figures written straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .imageio import ThermalImage  # noqa: E402
from .metrics import METHODS, RINGS, metric_key  # noqa: E402

KEYPOINT_COLOR = (0, 200, 255)
CENTER_COLOR = (0, 255, 0)
REGION_COLOR = (255, 255, 0)
REFINED_COLOR = (255, 0, 0)
OCCLUDED_COLOR = (160, 160, 160)


def to_display(image: ThermalImage, low: float = 1.0, high: float = 99.5) -> np.ndarray:
    """Percentile stretch of a thermal frame to 8 bits."""
    data = np.asarray(image.data, dtype=np.float64)
    lo, hi = np.percentile(data, [low, high])
    if hi <= lo:
        hi = lo + 1.0
    return np.clip(255.0 * (data - lo) / (hi - lo), 0, 255).astype(np.uint8)


def _cross(draw, xy, color, r=4):
    x, y = xy
    draw.line([(x - r, y), (x + r, y)], fill=color)
    draw.line([(x, y - r), (x, y + r)], fill=color)


def render_overlay(image: ThermalImage, record: dict, path) -> None:
    """8-bit RGB PNG: keypoints, projected canthi, region polygons and refined points."""
    canvas = Image.fromarray(to_display(image)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for x, y in record.get("keypoints", {}).get("points", []):
        draw.ellipse([x - 3, y - 3, x + 3, y + 3], outline=KEYPOINT_COLOR)
    for eye, ann in record["annotation"].items():
        region = ann["region"]
        color = OCCLUDED_COLOR if ann["occluded"] else REGION_COLOR
        poly = [tuple(p) for p in region["polygon"]]
        draw.line(poly + poly[:1], fill=color)
        _cross(draw, region["center"], CENTER_COLOR)
        if ann["refined_point"] is not None:
            x, y = ann["refined_point"]
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=REFINED_COLOR)
    canvas.save(Path(path), format="PNG")


def _bar_pairs(ax, summary: dict, metric: str, scale: float, ylabel: str):
    m = summary["metrics"]
    x = np.arange(len(RINGS))
    width = 0.38
    for j, method in enumerate(METHODS):
        cells = [m.get(metric_key(metric, method, k)) for k in RINGS]
        means = [scale * c.mean if c and c.n else np.nan for c in cells]
        stds = [scale * c.std if c and c.n else 0.0 for c in cells]
        ax.bar(x + (j - 0.5) * width, means, width, yerr=stds, capsize=3,
               label={"op3dmm": "projected", "refined": "refined"}[method])
    ax.set_xticks(x)
    ax.set_xticklabels([f"{k}-ring" for k in RINGS])
    ax.set_ylabel(ylabel)


def canthus_accuracy_figure(summary: dict, path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    _bar_pairs(axes[0], summary, "iou", 100.0, "IoU (x100)")
    _bar_pairs(axes[1], summary, "nme_man", 1.0, "NME vs manual (%)")
    _bar_pairs(axes[2], summary, "nme_gt", 1.0, "NME vs fitted (%)")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def landmark_nme_figure(per_landmark: dict[str, np.ndarray], path) -> None:
    """Per-landmark NME of the fitted and unfitted model reprojections."""
    fig, ax = plt.subplots(figsize=(12, 3.2))
    idx = np.arange(1, 69)
    for name, style in (("unfitted", dict(color="0.6")), ("fitted", dict(color="C0"))):
        if name in per_landmark:
            ax.plot(idx, per_landmark[name], marker="o", ms=3, lw=1, label=name, **style)
    ax.set_xlabel("landmark")
    ax.set_ylabel("NME (%)")
    ax.set_xlim(0.5, 68.5)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pose_error_figure(frames, path) -> None:
    errors = np.array([f.pose_error for f in frames if f.pose_error is not None])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if len(errors):
        ax.boxplot([errors[:, i] for i in range(3)])
        ax.set_xticks([1, 2, 3])
        ax.set_xticklabels(["pitch", "yaw", "roll"])
    ax.set_ylabel("absolute error (deg)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def timing_figure(timing: dict, path) -> None:
    stages = [s for s in ("pose", "visibility", "refinement") if s in timing]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(stages, [1e3 * timing[s]["seconds"] for s in stages], color="C1")
    ax.set_ylabel("mean time per frame (ms)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report_figures(report, prefix) -> list[Path]:
    """Write every figure for an evaluation report; returns the written paths."""
    prefix = Path(prefix)
    written = []

    def out(name):
        p = prefix.with_name(f"{prefix.name}_{name}.png")
        written.append(p)
        return p

    canthus_accuracy_figure(report.summary, out("canthus"))
    if report.landmark_nme:
        landmark_nme_figure(report.landmark_nme, out("landmarks"))
    pose_error_figure(report.frames, out("pose"))
    if report.timing:
        timing_figure(report.timing, out("timing"))
    return written
