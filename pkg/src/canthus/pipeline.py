"""End-to-end detector, ground-truth annotator and evaluation runner.

Detection runs in three timed stages:

1. ``pose``: affine camera from the five keypoints on the mean shape;
2. ``visibility``: hidden point removal on the posed mean shape, then the
   per-eye occlusion decision;
3. ``refinement``: canthus regions for the configured ring size, one blur of
   the frame, warmest pixel per visible eye.

Regions for the other ring sizes are added to the record afterwards for
evaluation and are not part of the timed path.

All records are JSON with ``"schema": 1``; geometry is in pixels with the
origin at the top-left pixel centre.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fitting import fit_landmarks, reprojection_error
from .imageio import ThermalImage
from .metrics import (RINGS, FrameEvaluation, aggregate, contour_of, face_bbox_size, nme, pose_error,
                      region_iou)
from .model import LEFT_INNER_CANTHUS_LM, RIGHT_INNER_CANTHUS_LM, MorphableModel
from .pose import AffineProjection, DegenerateGeometryError, HeadPose, Keypoints2D, decompose_rotation, \
    estimate_affine, project
from .refine import (EYES, CanthusAnnotation, CanthusRegion, EyeAnnotation, annotate_eyes, extract_region,
                     gaussian_smooth, refine_canthus)
from .visibility import VisibilityMask, canthus_occluded, mask_bank, posed_visibility

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("pose", "visibility", "refinement")
CANTHUS_LANDMARKS = (LEFT_INNER_CANTHUS_LM, RIGHT_INNER_CANTHUS_LM)


class PipelineError(Exception):
    """A stage failed. ``degenerate`` marks geometric (rather than input) failures."""

    def __init__(self, stage: str, message: str, degenerate: bool = False, partial: dict | None = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.degenerate = degenerate
        self.partial = partial


@dataclass(frozen=True)
class PipelineConfig:
    k_ring: int = 3
    sigma: float = 1.5
    lam: float = 0.05
    gamma: float | None = None  # None: log10 of the vertex count
    confidence_threshold: float = 0.3
    frontality_threshold: float = 30.0
    celsius: tuple[float, float] | None = None
    fit_iterations: int = 2
    fast_visibility: bool = False
    bank_step: float = 5.0

    def __post_init__(self):
        checks = [
            (1 <= self.k_ring <= 4, "k_ring must be in 1..4"),
            (0.0 <= self.sigma <= 20.0, "sigma must be in [0, 20] px"),
            (self.lam >= 0.0, "lambda must be non-negative"),
            (self.gamma is None or self.gamma > 0.0, "gamma must be positive"),
            (0.0 <= self.confidence_threshold <= 1.0, "confidence threshold must be in [0, 1]"),
            (0.0 <= self.frontality_threshold <= 90.0, "frontality threshold must be in [0, 90] deg"),
            (self.fit_iterations >= 1, "fit_iterations must be at least 1"),
            (self.bank_step > 0.0, "bank_step must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)
        if self.celsius is not None:
            if len(self.celsius) != 2:
                raise ValueError("celsius map is (scale, offset)")
            object.__setattr__(self, "celsius", (float(self.celsius[0]), float(self.celsius[1])))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["celsius"] = None if self.celsius is None else list(self.celsius)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        if doc.get("celsius") is not None:
            doc["celsius"] = tuple(doc["celsius"])
        return cls(**doc)


def dump_json(doc: dict) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def is_frontal(pose: HeadPose, threshold: float) -> bool:
    return max(abs(pose.pitch), abs(pose.yaw)) <= threshold


def _point(v) -> list[float] | None:
    return None if v is None else [float(x) for x in v]


# --------------------------------------------------------------------------
# detection


@dataclass
class FrameResult:
    frame_id: str
    image_size: tuple[int, int]  # width, height
    config: PipelineConfig
    keypoints: Keypoints2D
    projection: AffineProjection
    pose: HeadPose
    frontal: bool
    visibility: VisibilityMask
    annotation: CanthusAnnotation
    rings: dict[int, CanthusAnnotation] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)  # milliseconds per stage, plus "total"

    @property
    def occluded(self) -> tuple[bool, bool]:
        return self.annotation.left.occluded, self.annotation.right.occluded

    def to_dict(self) -> dict:
        """Detection record; timings are kept out so the record is reproducible."""
        return {
            "schema": SCHEMA_VERSION,
            "kind": "detection",
            "frame_id": self.frame_id,
            "image": {"width": self.image_size[0], "height": self.image_size[1]},
            "config": self.config.to_dict(),
            "keypoints": self.keypoints.to_dict(),
            "projection": self.projection.to_dict(),
            "pose": self.pose.to_dict(),
            "frontal": bool(self.frontal),
            "visibility": {**self.visibility.to_dict(), "fraction": self.visibility.fraction},
            "occluded": dict(zip(EYES, self.occluded)),
            "canthi": {eye: _point(ann.region.center) for eye, ann in zip(EYES, self.annotation.eyes())},
            "annotation": self.annotation.to_dict(),
            "rings": {str(k): ann.to_dict() for k, ann in sorted(self.rings.items())},
        }

    def timings_dict(self) -> dict:
        return {"frame_id": self.frame_id, "timings_ms": dict(self.timings)}


def _pose_stage(model: MorphableModel, kp: Keypoints2D, config: PipelineConfig):
    usable = int(np.count_nonzero(kp.confidence >= config.confidence_threshold))
    if kp.n != 5:
        raise PipelineError("pose", f"detection needs the 5 head keypoints, got {kp.n}")
    if usable < 4:
        raise PipelineError("pose", f"only {usable} keypoints reach confidence {config.confidence_threshold}")
    try:
        P = estimate_affine(kp.points, model.mean_shape[:, model.op_indices], kp.confidence,
                            config.confidence_threshold)
        return P, decompose_rotation(P.A)
    except DegenerateGeometryError as exc:
        raise PipelineError("pose", str(exc), degenerate=True) from None


def _visibility_stage(model: MorphableModel, R, config: PipelineConfig) -> VisibilityMask:
    try:
        if config.fast_visibility:
            return mask_bank(model, config.bank_step, config.gamma).lookup(R)
        return posed_visibility(model.mean_shape, R, config.gamma)[1]
    except DegenerateGeometryError as exc:
        raise PipelineError("visibility", str(exc), degenerate=True) from None


def _regions(model, P, k, shape=None) -> list[CanthusRegion]:
    return [extract_region(model, P, eye, k, shape) for eye in EYES]


def detect(model: MorphableModel, keypoints5: Keypoints2D, image: ThermalImage,
           config: PipelineConfig | None = None, frame_id: str = "frame",
           all_rings: bool = True) -> FrameResult:
    """Locate both inner canthi from five head keypoints and a thermal frame.

    Raises :class:`PipelineError` naming the failing stage. A refinement
    failure carries the finished pose and visibility in ``partial``.
    """
    config = config or PipelineConfig()
    if config.celsius is not None and image.intensity_map is None:
        image = ThermalImage(image.data, config.celsius)
    timings = {}

    t0 = time.perf_counter()
    P, pose = _pose_stage(model, keypoints5, config)
    t1 = time.perf_counter()
    mask = _visibility_stage(model, pose.R, config)
    occluded = canthus_occluded(mask, model, config.k_ring)
    t2 = time.perf_counter()
    partial = {"pose": pose.to_dict(), "projection": P.to_dict(), "occluded": dict(zip(EYES, occluded))}
    try:
        smoothed = gaussian_smooth(image, config.sigma)
        regions = _regions(model, P, config.k_ring)
        annotation = annotate_eyes(image, regions, occluded, config.sigma, smoothed)
    except ValueError as exc:
        raise PipelineError("refinement", str(exc), degenerate=True, partial=partial) from None
    t3 = time.perf_counter()
    timings.update(pose=1e3 * (t1 - t0), visibility=1e3 * (t2 - t1), refinement=1e3 * (t3 - t2),
                   total=1e3 * (t3 - t0))

    rings = {config.k_ring: annotation}
    if all_rings:
        for k in RINGS:
            if k in rings:
                continue
            try:
                rings[k] = annotate_eyes(image, _regions(model, P, k), occluded, config.sigma, smoothed)
            except ValueError as exc:
                log.warning("%s: %d-ring regions unavailable (%s)", frame_id, k, exc)

    return FrameResult(frame_id, (image.width, image.height), config, keypoints5, P, pose,
                       is_frontal(pose, config.frontality_threshold), mask, annotation, rings, timings)


# --------------------------------------------------------------------------
# ground-truth annotation


def ground_truth_record(model: MorphableModel, frame_id: str, config: PipelineConfig, image: ThermalImage,
                        shape, projection: AffineProjection, pose: HeadPose, visible, viewpoint,
                        landmarks68: Keypoints2D, alpha, occluded=None, extra: dict | None = None) -> dict:
    """Record with regions for every ring size, pose, dense visibility and landmarks."""
    if isinstance(visible, VisibilityMask):
        mask = visible
    else:
        # exact ray-cast visibility carries no hull radius; 0 marks it
        vp = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=float)
        mask = VisibilityMask(np.asarray(visible, dtype=bool), vp, 0.0)
    if occluded is None:
        occluded = canthus_occluded(mask, model, config.k_ring)
    rings = {}
    for k in RINGS:
        regions = _regions(model, projection, k, shape)
        rings[str(k)] = {eye: EyeAnnotation(r, bool(o)).to_dict() for eye, r, o in zip(EYES, regions, occluded)}
    canthi = project(projection, np.asarray(shape)[:, model.canthus_indices])
    fitted68 = project(projection, np.asarray(shape)[:, model.lm68_indices])
    unfitted68 = project(projection, model.mean_shape[:, model.lm68_indices])
    doc = {
        "schema": SCHEMA_VERSION,
        "kind": "ground_truth",
        "frame_id": frame_id,
        "image": {"width": image.width, "height": image.height},
        "config": config.to_dict(),
        "projection": projection.to_dict(),
        "pose": pose.to_dict(),
        "frontal": is_frontal(pose, config.frontality_threshold),
        "visibility": {**mask.to_dict(), "fraction": mask.fraction},
        "occluded": {eye: bool(o) for eye, o in zip(EYES, occluded)},
        "canthi": {eye: _point(canthi[:, i]) for i, eye in enumerate(EYES)},
        "rings": rings,
        "landmarks68": landmarks68.points.T.tolist(),
        "landmarks68_fitted": fitted68.T.tolist(),
        "landmarks68_unfitted": unfitted68.T.tolist(),
        "coefficients": {"alpha": [float(a) for a in alpha], "lambda": float(config.lam)},
    }
    if extra:
        doc.update(extra)
    return doc


def annotate_gt(model: MorphableModel, landmarks68: Keypoints2D, image: ThermalImage,
                config: PipelineConfig | None = None, frame_id: str = "frame") -> dict:
    """Fit the model to 68 manual landmarks and derive the augmented annotation."""
    config = config or PipelineConfig()
    if landmarks68.n != 68:
        raise PipelineError("fitting", f"annotation needs 68 landmarks, got {landmarks68.n}")
    try:
        fit = fit_landmarks(model, landmarks68, config.lam, config.fit_iterations)
        shape = fit.shape.vertices
        mask = posed_visibility(shape, fit.pose.R, config.gamma)[1]
        return ground_truth_record(
            model, frame_id, config, image, shape, fit.projection, fit.pose, mask, None, landmarks68,
            fit.coefficients.alpha,
            extra={"fit_rms_px": [float(e) for e in fit.errors],
                   "unfitted_rms_px": reprojection_error(fit.projection, model.mean_shape, model, landmarks68)},
        )
    except DegenerateGeometryError as exc:
        raise PipelineError("fitting", str(exc), degenerate=True) from None
    except np.linalg.LinAlgError as exc:
        raise PipelineError("fitting", str(exc), degenerate=True) from None


# --------------------------------------------------------------------------
# evaluation


def _eye_record(doc: dict, k: int, eye: str) -> dict | None:
    return doc.get("rings", {}).get(str(k), {}).get(eye)


def evaluate_pair(pred: dict, gt: dict) -> FrameEvaluation:
    """Compare one prediction record with its ground truth."""
    lm68 = np.asarray(gt["landmarks68"], dtype=float).T
    bbox = face_bbox_size(contour_of(lm68))
    dims = (int(gt["image"]["height"]), int(gt["image"]["width"]))
    ev = FrameEvaluation(pred.get("frame_id", gt.get("frame_id", "")))
    for k in RINGS:
        for i, eye in enumerate(EYES):
            p, g = _eye_record(pred, k, eye), _eye_record(gt, k, eye)
            if p is None or g is None:
                continue
            p_region, g_region = CanthusRegion.from_dict(p["region"]), CanthusRegion.from_dict(g["region"])
            g_center = np.asarray(gt["canthi"][eye], dtype=float)
            manual = lm68[:, CANTHUS_LANDMARKS[i]]
            candidates = {"op3dmm": (p_region.center, p_region)}
            refined = p.get("refined_point")
            if refined is not None:
                shift = np.asarray(refined, dtype=float) - p_region.center
                moved = CanthusRegion(eye, np.asarray(refined, dtype=float), p_region.polygon + shift, k)
                candidates["refined"] = (moved.center, moved)
            for method, (point, region) in candidates.items():
                iou = region_iou(region, g_region, dims)
                if iou is not None:
                    ev.values.setdefault(f"iou:{method}:k{k}", []).append(iou)
                ev.values.setdefault(f"nme_gt:{method}:k{k}", []).append(float(nme(point, g_center, bbox)[0]))
                ev.values.setdefault(f"nme_man:{method}:k{k}", []).append(float(nme(point, manual, bbox)[0]))
    ev.occlusion_correct = [bool(pred["occluded"][eye]) == bool(gt["occluded"][eye]) for eye in EYES]
    ev.pose_error = pose_error(HeadPose.from_dict(pred["pose"]), HeadPose.from_dict(gt["pose"]))
    return ev


def landmark_nme(gt: dict) -> dict[str, np.ndarray]:
    """Per-landmark NME of the fitted and unfitted reprojections against the manual 68 points."""
    lm68 = np.asarray(gt["landmarks68"], dtype=float).T
    bbox = face_bbox_size(contour_of(lm68))
    out = {}
    for name in ("fitted", "unfitted"):
        pts = gt.get(f"landmarks68_{name}")
        if pts is not None:
            out[name] = nme(np.asarray(pts, dtype=float).T, lm68, bbox)
    return out


def frame_id_of(path: Path) -> str:
    stem = path.name[:-len(".json")]
    for suffix in ("_pred", "_gt"):
        if stem.endswith(suffix):
            return stem[:-len(suffix)]
    return stem


def _records(directory, require_kind: str | None = None) -> dict[str, Path]:
    out = {}
    for path in sorted(Path(directory).glob("*.json")):
        if path.name.endswith((".timings.json", "_kp5.json", "_lm68.json")):
            continue
        out[frame_id_of(path)] = path
    return out


def _read(path: Path) -> dict:
    doc = json.loads(path.read_text())
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema {doc.get('schema')!r}")
    return doc


@dataclass
class EvaluationReport:
    summary: dict
    frames: list[FrameEvaluation]
    landmark_nme: dict[str, np.ndarray]  # per-landmark mean NME over frames
    unmatched: dict[str, list[str]]
    timing: dict | None = None

    def to_dict(self) -> dict:
        from .metrics import summary_to_json

        return {
            "schema": SCHEMA_VERSION,
            "summary": summary_to_json(self.summary),
            "landmark_nme": {k: [float(x) for x in v] for k, v in self.landmark_nme.items()},
            "unmatched": self.unmatched,
            "timing": self.timing,
            "frames": [f.to_dict() for f in self.frames],
        }


def evaluate(pred_dir, gt_dir, config: PipelineConfig | None = None) -> EvaluationReport:
    """Pair records by frame id, score each pair and aggregate.

    Unmatched ids are logged and skipped. Timing sidecars found next to the
    predictions are folded into a per-stage timing table.
    """
    preds, gts = _records(pred_dir), _records(gt_dir)
    unmatched = {"predictions": sorted(set(preds) - set(gts)), "ground_truth": sorted(set(gts) - set(preds))}
    for side, ids in unmatched.items():
        if ids:
            log.warning("skipping %d unmatched %s: %s", len(ids), side, ", ".join(ids))
    frames, lm_rows = [], {}
    for fid in sorted(set(preds) & set(gts)):
        gt = _read(gts[fid])
        ev = evaluate_pair(_read(preds[fid]), gt)
        ev.frame_id = fid
        frames.append(ev)
        for name, row in landmark_nme(gt).items():
            lm_rows.setdefault(name, []).append(row)
    if not frames:
        raise ValueError("no frame ids shared between predictions and ground truth")
    timing = None
    sidecars = sorted(Path(pred_dir).glob("*.timings.json"))
    if sidecars:
        timing = timing_report([json.loads(p.read_text())["timings_ms"] for p in sidecars])
    return EvaluationReport(aggregate(frames), frames,
                            {k: np.mean(v, axis=0) for k, v in lm_rows.items()}, unmatched, timing)


# --------------------------------------------------------------------------
# timing


def timing_report(results) -> dict:
    """Mean seconds and FPS per stage from ``FrameResult`` objects or millisecond dicts."""
    rows = [r.timings if isinstance(r, FrameResult) else r for r in results]
    if not rows:
        raise ValueError("timing report needs at least one frame")
    out = {}
    for stage in (*STAGES, "total"):
        vals = [r[stage] for r in rows if stage in r]
        if not vals:
            continue
        sec = float(np.mean(vals)) / 1e3
        out[stage] = {"seconds": sec, "fps": (1.0 / sec) if sec > 0 else float("inf"), "n": len(vals)}
    return out


def _fmt_fps(fps: float) -> str:
    if not np.isfinite(fps):
        return "inf"
    return f"{fps / 1000:.1f}K" if fps >= 1000 else f"{fps:.1f}"


def format_timing(report: dict) -> str:
    """Two-row table, FPS over seconds, one column per stage; detector time is not included."""
    names = {"pose": "Pose", "visibility": "Visibility", "refinement": "Refinement", "total": "Total"}
    cols = [s for s in (*STAGES, "total") if s in report]
    header = ["", *(names[s] for s in cols)]
    fps = ["FPS", *(_fmt_fps(report[s]["fps"]) for s in cols)]
    sec = ["Sec", *(f"{report[s]['seconds']:.4f}" for s in cols)]
    widths = [max(len(r[i]) for r in (header, fps, sec)) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in (header, fps, sec)]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
