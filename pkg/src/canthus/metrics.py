"""Landmark, region, occlusion and head-pose metrics, and their aggregation.

Conventions:

* NME: ``100 * |d - g| / sqrt(w * h)`` with ``w, h`` the extent of the
  17 jaw-contour landmarks of the manual 68-point annotation.
* IoU: pixel sets rasterised with the inclusion rule of :mod:`canthus.refine`.
* Pose error: absolute Euler-angle differences, wrapped into [0, 180].
* Spreads are population standard deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import CONTOUR_SLICE
from .pose import HeadPose, wrap_angle
from .refine import CanthusRegion, polygon_mask

METHODS = ("op3dmm", "refined")
RINGS = (1, 2, 3, 4)


def face_bbox_size(contour) -> float:
    """``sqrt(width * height)`` of the axis-aligned box around ``(2, C)`` contour points."""
    contour = np.asarray(contour, dtype=np.float64)
    if contour.ndim != 2 or contour.shape[0] != 2 or contour.shape[1] < 2:
        raise ValueError(f"contour must be 2 x C with C >= 2, got {contour.shape}")
    w, h = np.ptp(contour, axis=1)
    if w <= 0 or h <= 0:
        raise ValueError("face bounding box has zero area")
    return float(np.sqrt(w * h))


def contour_of(landmarks68) -> np.ndarray:
    return np.asarray(landmarks68, dtype=np.float64)[:, CONTOUR_SLICE]


def nme(detected, gt, bbox_size: float) -> np.ndarray:
    """Per-landmark normalised error in percent."""
    detected = np.asarray(detected, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if detected.shape != gt.shape:
        raise ValueError(f"shape mismatch {detected.shape} vs {gt.shape}")
    if detected.ndim == 1:
        detected, gt = detected[:, None], gt[:, None]
    return 100.0 * np.linalg.norm(detected - gt, axis=0) / bbox_size


def region_iou(predicted: CanthusRegion, gt: CanthusRegion, dims: tuple[int, int]) -> float | None:
    """Pixel IoU of two regions on a ``(height, width)`` frame; ``None`` if both are empty."""
    height, width = dims
    a = polygon_mask(predicted.polygon, height, width)
    b = polygon_mask(gt.polygon, height, width)
    union = np.count_nonzero(a | b)
    if union == 0:
        return None
    return np.count_nonzero(a & b) / union


def pose_error(pred: HeadPose, gt: HeadPose) -> np.ndarray:
    """``(e_pitch, e_yaw, e_roll)`` in degrees."""
    p = np.asarray(pred.euler if isinstance(pred, HeadPose) else pred, dtype=np.float64)
    g = np.asarray(gt.euler if isinstance(gt, HeadPose) else gt, dtype=np.float64)
    return np.abs(wrap_angle(p - g))


def metric_key(metric: str, method: str, k: int | None = None) -> str:
    return f"{metric}:{method}" if k is None else f"{metric}:{method}:k{k}"


@dataclass
class FrameEvaluation:
    frame_id: str
    values: dict[str, list[float]] = field(default_factory=dict)  # metric key -> per-eye values
    occlusion_correct: list[bool] = field(default_factory=list)  # per eye
    pose_error: np.ndarray | None = None  # (pitch, yaw, roll) degrees

    @property
    def frame_occlusion_correct(self) -> bool:
        return all(self.occlusion_correct)

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "values": self.values,
                "occlusion_correct": self.occlusion_correct,
                "pose_error": None if self.pose_error is None else [float(v) for v in self.pose_error]}


@dataclass
class Summary:
    mean: float
    std: float
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


def summarize(values) -> Summary:
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return Summary(float("nan"), float("nan"), 0)
    return Summary(float(v.mean()), float(v.std()), int(v.size))


def aggregate(frames: list[FrameEvaluation]) -> dict:
    """Pool per-eye values over frames; occlusion accuracy in percent, per frame and per eye."""
    if not frames:
        raise ValueError("cannot aggregate an empty list of frames")
    keys = sorted({k for f in frames for k in f.values})
    metrics = {k: summarize([v for f in frames for v in f.values.get(k, [])]) for k in keys}
    out = {"n_frames": len(frames), "metrics": metrics}
    occ = [f for f in frames if f.occlusion_correct]
    if occ:
        out["occlusion_frame_pct"] = 100.0 * np.mean([f.frame_occlusion_correct for f in occ])
        out["occlusion_eye_pct"] = 100.0 * np.mean([c for f in occ for c in f.occlusion_correct])
    poses = np.array([f.pose_error for f in frames if f.pose_error is not None])
    if len(poses):
        out["pose_error"] = {name: summarize(poses[:, i]) for i, name in enumerate(("pitch", "yaw", "roll"))}
    return out


def summary_to_json(summary: dict) -> dict:
    def conv(x):
        if isinstance(x, Summary):
            return x.to_dict()
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (np.floating, np.integer)):
            return x.item()
        return x

    return conv(summary)


def accuracy_table_rows(summary: dict) -> list[tuple[str, str, Summary | None, Summary | None]]:
    """Rows ``(ring, measure, op3dmm, refined)`` in the layout of the canthus accuracy table."""
    m = summary["metrics"]
    rows = []
    for k in RINGS:
        for measure, metric in (("IoU", "iou"), ("NME (man)(%)", "nme_man"), ("NME (gt)(%)", "nme_gt")):
            cells = [m.get(metric_key(metric, method, k)) for method in METHODS]
            rows.append((f"{k}-Ring", measure, *cells))
    return rows


def format_accuracy_table(summary: dict) -> str:
    """Aligned plain-text table: ring x {IoU, NME(man), NME(gt)} by {OP+3DMM, Refinement}."""
    def cell(s: Summary | None, scale: float = 1.0) -> str:
        if s is None or s.n == 0:
            return "-"
        return f"{scale * s.mean:.1f} ± {scale * s.std:.1f}"

    header = ("", "", "OP+3DMM", "Refinement")
    lines = [header]
    for ring, measure, op, ref in accuracy_table_rows(summary):
        scale = 100.0 if measure == "IoU" else 1.0
        lines.append((ring, measure, cell(op, scale), cell(ref, scale)))
    occ = summary.get("occlusion_frame_pct")
    lines.append(("", "Occlusion (%)", "-" if occ is None else f"{occ:.1f}", "-"))
    widths = [max(len(r[i]) for r in lines) for i in range(4)]
    text = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in lines]
    text.insert(1, "-+-".join("-" * w for w in widths))
    pe = summary.get("pose_error")
    if pe:
        text.append("")
        text.append("Pose error (deg): " + ", ".join(f"{k} {v.mean:.2f} ± {v.std:.2f}" for k, v in pe.items()))
    return "\n".join(text)
