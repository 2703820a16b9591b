"""Synthetic thermal scenes with known pose, shape, visibility and hotspots.

Rendering model (raw 16-bit units):

* background: vertical ramp from ``skin - 0.05 H`` (top) to ``skin + 0.25 H``
  (bottom), i.e. 30 % of the hotspot amplitude ``H``;
* face: the projected mesh silhouette at uniform ``skin`` intensity;
* canthi: Gaussian blobs of peak ``H * a`` at each visible canthus, where the
  apparent warmth ``a`` falls from 1 to 0.1 as the face turns 10 to 50 degrees
  off-axis;
* seeded Gaussian pixel noise.

Ground-truth visibility comes from exact ray casting on the posed mesh.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .fitting import DeformationCoefficients, deform
from .imageio import ThermalImage
from .model import MorphableModel, k_ring
from .pose import AffineProjection, HeadPose, Keypoints2D, project, rotation_from_euler
from .raycast import raycast_visible
from .refine import DEFAULT_K
from .visibility import orthographic_viewpoint, rotate_shape

FRAME_SIZE = (1024, 768)  # width, height


@dataclass
class HotspotParams:
    skin: float = 30000.0
    amplitude: float = 8000.0
    sigma: float = 3.5  # blob spread, pixels
    pixel_noise: float = 80.0
    onset_deg: float = 10.0  # off-axis angle where apparent warmth starts to drop
    full_deg: float = 50.0  # off-axis angle where it bottoms out
    floor: float = 0.1


@dataclass
class SyntheticScene:
    true_pose: HeadPose
    true_alpha: DeformationCoefficients
    true_projection: AffineProjection
    image: ThermalImage
    true_keypoints5: Keypoints2D
    true_keypoints68: Keypoints2D
    keypoints5: Keypoints2D  # observed, jittered by noise_sigma
    keypoints68: Keypoints2D
    true_canthi: np.ndarray  # (2, 2) columns left, right
    true_occluded: tuple[bool, bool]
    true_visibility: np.ndarray  # (V,) ray-cast flags
    shape: np.ndarray  # (3, V) deformed vertices
    noise_sigma: float
    seed: int
    hotspot_peak: np.ndarray = field(default=None)  # (2,) blob amplitude per eye, 0 when occluded

    @property
    def frontal_angle(self) -> float:
        return max(abs(self.true_pose.pitch), abs(self.true_pose.yaw))


def perturb_keypoints(kp: Keypoints2D, sigma: float, seed) -> Keypoints2D:
    """Add isotropic Gaussian pixel noise with an explicit seed."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = kp.points + (rng.normal(0.0, sigma, kp.points.shape) if sigma > 0 else 0.0)
    return Keypoints2D(pts, labels=kp.labels, confidence=kp.confidence.copy())


def apparent_warmth(R, params: HotspotParams) -> float:
    off_axis = np.degrees(np.arccos(np.clip(R[2, 2], -1.0, 1.0)))
    frac = (off_axis - params.onset_deg) / (params.full_deg - params.onset_deg)
    return float(np.clip(1.0 - (1.0 - params.floor) * frac, params.floor, 1.0))


def _silhouette(P: AffineProjection, shape: np.ndarray, faces: np.ndarray, size) -> np.ndarray:
    width, height = size
    uv = project(P, shape).T
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for tri in uv[faces]:
        draw.polygon([tuple(p) for p in tri], fill=1)
    return np.array(canvas, dtype=bool)


def render_scene(model: MorphableModel, pose=(0.0, 0.0, 0.0), alpha=None, hotspot: HotspotParams | None = None,
                 noise_sigma: float = 0.0, seed: int = 0, scale: float = 280.0, center=None,
                 size=FRAME_SIZE, k: int = DEFAULT_K) -> SyntheticScene:
    """Deform, rotate and project ``model``; paint a thermal frame around it.

    ``pose`` is ``(pitch, yaw, roll)`` in degrees.
    """
    pitch, yaw, roll = (float(v) for v in pose)
    if abs(yaw) > 85.0:
        raise ValueError("|yaw| must not exceed 85 degrees")
    hotspot = hotspot or HotspotParams()
    rng = np.random.default_rng(seed)
    width, height = size
    alpha = np.zeros(model.n_components) if alpha is None else np.asarray(alpha, dtype=np.float64)
    shape = deform(model, alpha).vertices

    R = rotation_from_euler(pitch, yaw, roll)
    A = scale * R[:2]
    c = shape.mean(axis=1)
    center = np.array([width / 2.0, height / 2.0]) if center is None else np.asarray(center, dtype=float)
    P = AffineProjection(A, center - A @ c)

    kp5 = Keypoints2D(project(P, shape[:, model.op_indices]))
    kp68 = Keypoints2D(project(P, shape[:, model.lm68_indices]))
    canthi = project(P, shape[:, model.canthus_indices])

    rotated = rotate_shape(shape, R)
    visible = raycast_visible(rotated, model.faces, orthographic_viewpoint(rotated))
    occluded = []
    for seed_vertex in model.canthus_indices:
        ring = k_ring(model, int(seed_vertex), k)
        occluded.append(bool(visible[ring].sum() * 2 < ring.size))

    uv = project(P, shape)
    if uv[0].max() < 0 or uv[0].min() > width - 1 or uv[1].max() < 0 or uv[1].min() > height - 1:
        raise ValueError("pose places the face entirely outside the frame")

    rows = np.arange(height, dtype=np.float64)[:, None]
    top, bottom = hotspot.skin - 0.05 * hotspot.amplitude, hotspot.skin + 0.25 * hotspot.amplitude
    img = np.broadcast_to(top + (bottom - top) * rows / max(height - 1, 1), (height, width)).copy()
    img[_silhouette(P, shape, model.faces, size)] = hotspot.skin
    warmth = apparent_warmth(R, hotspot)
    ys, xs = np.mgrid[0:height, 0:width]
    peaks = np.zeros(2)
    for eye in range(2):
        if occluded[eye]:
            continue
        cx, cy = canthi[:, eye]
        r = int(np.ceil(5 * hotspot.sigma))
        x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, width)
        y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, height)
        if x1 <= x0 or y1 <= y0:
            continue
        d2 = (xs[y0:y1, x0:x1] - cx) ** 2 + (ys[y0:y1, x0:x1] - cy) ** 2
        peaks[eye] = hotspot.amplitude * warmth
        img[y0:y1, x0:x1] += peaks[eye] * np.exp(-0.5 * d2 / hotspot.sigma ** 2)
    if hotspot.pixel_noise > 0:
        img += rng.normal(0.0, hotspot.pixel_noise, img.shape)
    image = ThermalImage(np.clip(np.round(img), 0, 65535).astype(np.uint16))

    kp_rng = np.random.default_rng([seed, 1])
    return SyntheticScene(
        true_pose=HeadPose(R, scale),
        true_alpha=DeformationCoefficients(alpha, 0.0),
        true_projection=P,
        image=image,
        true_keypoints5=kp5,
        true_keypoints68=kp68,
        keypoints5=perturb_keypoints(kp5, noise_sigma, kp_rng),
        keypoints68=perturb_keypoints(kp68, noise_sigma, kp_rng),
        true_canthi=canthi,
        true_occluded=(occluded[0], occluded[1]),
        true_visibility=visible,
        shape=shape,
        noise_sigma=float(noise_sigma),
        seed=int(seed),
        hotspot_peak=peaks,
    )


def random_pose(rng: np.random.Generator, max_pitch: float = 60.0, max_yaw: float = 60.0,
                max_roll: float = 45.0) -> tuple[float, float, float]:
    return (float(rng.uniform(-max_pitch, max_pitch)), float(rng.uniform(-max_yaw, max_yaw)),
            float(rng.uniform(-max_roll, max_roll)))


def random_scene(model: MorphableModel, seed: int, noise_sigma: float = 0.0, alpha_scale: float = 0.5,
                 max_pitch: float = 60.0, max_yaw: float = 60.0, max_roll: float = 45.0,
                 **kwargs) -> SyntheticScene:
    """Scene with pose, shape and placement drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0])
    pose = random_pose(rng, max_pitch, max_yaw, max_roll)
    alpha = alpha_scale * rng.normal(size=model.n_components) * np.sqrt(model.reg_weights)
    width, height = kwargs.get("size", FRAME_SIZE)
    center = np.array([width / 2.0, height / 2.0]) + rng.uniform(-40, 40, 2)
    return render_scene(model, pose, alpha, noise_sigma=noise_sigma, seed=seed, center=center, **kwargs)


def naive_hottest_pixel(image: ThermalImage, sigma: float = 1.5) -> np.ndarray:
    """Whole-frame argmax after smoothing; the strawman the region search replaces."""
    from .refine import gaussian_smooth

    data = gaussian_smooth(image, sigma).data
    row, col = np.unravel_index(int(np.argmax(data)), data.shape)
    return np.array([float(col), float(row)])


def scene_ground_truth(model: MorphableModel, scene: SyntheticScene, frame_id: str, config=None) -> dict:
    """Ground-truth record for a scene in the annotation schema, from the true geometry."""
    from .pipeline import PipelineConfig, ground_truth_record

    config = config or PipelineConfig()
    return ground_truth_record(
        model, frame_id, config, scene.image, shape=scene.shape, projection=scene.true_projection,
        pose=scene.true_pose, visible=scene.true_visibility, viewpoint=None,
        landmarks68=scene.true_keypoints68, alpha=scene.true_alpha.alpha,
        occluded=scene.true_occluded,
    )


def write_scene(model: MorphableModel, scene: SyntheticScene, out_dir, frame_id: str, config=None) -> dict:
    """Write ``<id>.png``, ``<id>_kp5.json``, ``<id>_lm68.json`` and ``<id>_gt.json``."""
    from .imageio import write_thermal
    from .pipeline import dump_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_thermal(scene.image, out / f"{frame_id}.png")
    (out / f"{frame_id}_kp5.json").write_text(json.dumps(scene.keypoints5.to_dict()))
    (out / f"{frame_id}_lm68.json").write_text(json.dumps(scene.keypoints68.to_dict()))
    gt = scene_ground_truth(model, scene, frame_id, config)
    (out / f"{frame_id}_gt.json").write_text(dump_json(gt))
    return gt
