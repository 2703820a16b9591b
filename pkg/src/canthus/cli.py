"""Command line entry point: ``canthus detect|annotate|eval|synth``.

Exit status: 0 on success, 2 for unusable input, 3 for degenerate geometry.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .fitting import SingularSystemError
from .imageio import read_thermal
from .metrics import format_accuracy_table, summary_to_json
from .model import ModelFormatError, MorphableModel, load_model, save_model
from .pipeline import (PipelineConfig, PipelineError, annotate_gt, detect, dump_json, evaluate, format_timing)
from .pose import DegenerateGeometryError, load_keypoints

log = logging.getLogger("canthus")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 2, 3
BUILTIN_PREFIX = "builtin:"
SYNTH_MODEL = (6704, 30)


def _celsius(text: str) -> tuple[float, float]:
    try:
        scale, offset = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected SCALE,OFFSET") from None
    return scale, offset


def resolve_model(spec: str) -> MorphableModel:
    """Load a model file, or build the procedural face for ``builtin:V[:K]``."""
    if spec.startswith(BUILTIN_PREFIX):
        from .facegen import cached_face_model

        parts = spec[len(BUILTIN_PREFIX):].split(":")
        try:
            n_vertices = int(parts[0])
            n_components = int(parts[1]) if len(parts) > 1 else 10
        except ValueError:
            raise ValueError(f"bad builtin model spec {spec!r}; use builtin:V or builtin:V:K") from None
        return cached_face_model(n_vertices, n_components)
    return load_model(spec)


def _config(args, **overrides) -> PipelineConfig:
    fields = dict(
        k_ring=getattr(args, "k", 3),
        sigma=getattr(args, "sigma", 1.5),
        gamma=getattr(args, "gamma", None),
        frontality_threshold=getattr(args, "frontality", 30.0),
        celsius=getattr(args, "celsius", None),
        fast_visibility=getattr(args, "fast_visibility", False),
        confidence_threshold=getattr(args, "min_confidence", 0.3),
        lam=getattr(args, "lam", 0.05),
        fit_iterations=getattr(args, "fit_iters", 2),
    )
    fields.update(overrides)
    return PipelineConfig(**fields)


def _output(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _timings_path(out: Path) -> Path:
    return out.with_name(out.stem + ".timings.json")


def cmd_detect(args) -> int:
    model = resolve_model(args.model)
    config = _config(args)
    image = read_thermal(args.image, config.celsius)
    kp = load_keypoints(args.keypoints)
    result = detect(model, kp, image, config, frame_id=Path(args.image).stem)
    out = _output(args.out)
    record = result.to_dict()
    out.write_text(dump_json(record))
    _timings_path(out).write_text(dump_json(result.timings_dict()))
    if args.overlay:
        from .plotting import render_overlay

        render_overlay(image, record, _output(args.overlay))
    flags = ", ".join(f"{e} {'occluded' if o else 'visible'}" for e, o in zip(("left", "right"), result.occluded))
    log.info("%s: pitch %.1f yaw %.1f roll %.1f (%s); %s", result.frame_id, result.pose.pitch, result.pose.yaw,
             result.pose.roll, "frontal" if result.frontal else "non-frontal", flags)
    return EXIT_OK


def cmd_annotate(args) -> int:
    model = resolve_model(args.model)
    config = _config(args)
    image = read_thermal(args.image)
    landmarks = load_keypoints(args.landmarks)
    record = annotate_gt(model, landmarks, image, config, frame_id=Path(args.image).stem)
    _output(args.out).write_text(dump_json(record))
    log.info("%s: landmark RMS %.3f px after fitting", record["frame_id"], record["fit_rms_px"][-1])
    return EXIT_OK


def _write_csv(report, path: Path) -> None:
    keys = sorted({k for f in report.frames for k in f.values})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "eye_index", *keys, "occlusion_correct", "e_pitch", "e_yaw", "e_roll"])
        for f in report.frames:
            for i in range(2):
                row = [f.frame_id, i]
                for k in keys:
                    vals = f.values.get(k, [])
                    row.append(f"{vals[i]:.6g}" if i < len(vals) else "")
                row.append(int(f.occlusion_correct[i]) if f.occlusion_correct else "")
                row.extend(f"{e:.6g}" for e in f.pose_error)
                writer.writerow(row)


def cmd_eval(args) -> int:
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    report = evaluate(args.pred, args.gt)
    out = _output(args.out)
    out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True, default=float) + "\n")
    text = format_accuracy_table(report.summary)
    if report.timing:
        text += "\n\nExecution time per step (keypoint detector excluded)\n" + format_timing(report.timing)
    out.with_suffix(".txt").write_text(text + "\n")
    if args.csv:
        _write_csv(report, _output(args.csv))
    if not args.no_figures:
        from .plotting import report_figures

        report_figures(report, out.with_suffix(""))
    print(text)
    return EXIT_OK


def _synth_one(job):
    model_path, out_dir, seed, index, noise = job
    from .synth import random_scene, write_scene

    model = load_model(model_path)
    scene = random_scene(model, seed=seed * 100003 + index, noise_sigma=noise)
    write_scene(model, scene, out_dir, f"scene_{index:04d}")
    return index


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ValueError("--n must be positive")
    if args.noise < 0:
        raise ValueError("--noise must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.c3dm"
    if args.model:
        save_model(resolve_model(args.model), model_path)
    else:
        from .facegen import make_face_model

        save_model(make_face_model(*SYNTH_MODEL, name="synthetic_face"), model_path)
    jobs = [(str(model_path), str(out), args.seed, i, args.noise) for i in range(args.n)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_synth_one, jobs))
    else:
        for job in jobs:
            _synth_one(job)
    log.info("wrote %d scenes and %s to %s", args.n, model_path.name, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canthus", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="locate both inner canthi in one frame")
    d.add_argument("--model", required=True, help="model file, or builtin:V[:K]")
    d.add_argument("--keypoints", required=True, help="JSON with the 5 head keypoints")
    d.add_argument("--image", required=True, help="16-bit PNG or PGM thermal frame")
    d.add_argument("--out", required=True)
    d.add_argument("--overlay", help="write an 8-bit PNG overlay here")
    d.add_argument("--k", type=int, default=3, help="k-ring radius (1-4)")
    d.add_argument("--sigma", type=float, default=1.5, help="smoothing sigma, pixels")
    d.add_argument("--gamma", type=float, default=None, help="visibility radius exponent (default max(log10 V, 2.5))")
    d.add_argument("--frontality", type=float, default=30.0, help="frontal threshold, degrees")
    d.add_argument("--celsius", type=_celsius, default=None, metavar="S,O")
    d.add_argument("--fast-visibility", action="store_true", help="use the precomputed mask bank")
    d.add_argument("--min-confidence", type=float, default=0.3)
    d.set_defaults(func=cmd_detect)

    a = sub.add_parser("annotate", help="fit the model to 68 landmarks and emit ground truth")
    a.add_argument("--model", required=True)
    a.add_argument("--landmarks", required=True, help="JSON with 68 landmarks")
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--lambda", dest="lam", type=float, default=0.05)
    a.add_argument("--fit-iters", type=int, default=2)
    a.add_argument("--k", type=int, default=3)
    a.add_argument("--gamma", type=float, default=None)
    a.set_defaults(func=cmd_annotate)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="report JSON; .txt table and figures go alongside")
    e.add_argument("--csv", help="per-frame values as CSV")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write synthetic scenes with ground truth")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="keypoint noise sigma, pixels")
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="model to render (default: procedural face, V=6704)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        log.error("error in %s", exc)
        return EXIT_DEGENERATE if exc.degenerate else EXIT_INPUT
    except (DegenerateGeometryError, SingularSystemError, np.linalg.LinAlgError) as exc:
        log.error("degenerate geometry: %s", exc)
        return EXIT_DEGENERATE
    except (ModelFormatError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
