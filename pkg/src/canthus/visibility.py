"""Self-occlusion of the posed face model via hidden point removal.

Points are translated so the viewpoint is the origin, spherically flipped
about a sphere of radius ``10**gamma * max|p|``, and a point is declared
visible when its flipped image is a vertex of the convex hull of the flipped
cloud plus the origin.

With a distant viewpoint the useful radius grows with sampling density, so
the default ``gamma`` is ``log10(V)`` (radius factor equal to the point count),
floored at 2.5 so that very sparse clouds still get a large sphere.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .model import MorphableModel, k_ring
from .pose import DegenerateGeometryError, rotation_from_euler

DEFAULT_GAMMA = None  # auto: log10 of the point count
MIN_AUTO_GAMMA = 2.5
COPLANAR_RTOL = 1e-12
VIEW_DISTANCE_FACTOR = 10.0


@dataclass
class VisibilityMask:
    visible: np.ndarray  # (V,) bool
    viewpoint: np.ndarray  # (3,)
    radius_param: float  # gamma actually used

    @property
    def fraction(self) -> float:
        return float(self.visible.mean())

    def to_dict(self) -> dict:
        return {"rle": rle_encode(self.visible), "n": int(self.visible.size),
                "viewpoint": [float(v) for v in self.viewpoint], "gamma": float(self.radius_param)}

    @classmethod
    def from_dict(cls, doc: dict) -> "VisibilityMask":
        return cls(rle_decode(doc["rle"], doc["n"]), np.asarray(doc["viewpoint"], dtype=float),
                   float(doc["gamma"]))


def rle_encode(flags) -> dict:
    """Run lengths of a boolean array, starting with the value of the first run."""
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return {"start": False, "runs": []}
    change = np.flatnonzero(np.diff(flags.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flags.size]])
    return {"start": bool(flags[0]), "runs": np.diff(bounds).astype(int).tolist()}


def rle_decode(rle: dict, n: int | None = None) -> np.ndarray:
    runs = rle["runs"]
    values = np.arange(len(runs)) % 2 == (0 if rle["start"] else 1)
    out = np.repeat(values, runs)
    if n is not None and out.size != n:
        raise ValueError(f"run lengths sum to {out.size}, expected {n}")
    return out


def rotate_shape(shape, R) -> np.ndarray:
    """Rotate ``(3, V)`` points by ``R`` about their centroid."""
    shape = np.asarray(shape, dtype=np.float64)
    c = shape.mean(axis=1, keepdims=True)
    return np.asarray(R) @ (shape - c) + c


def orthographic_viewpoint(rotated_shape, distance_factor: float = VIEW_DISTANCE_FACTOR) -> np.ndarray:
    """Stand-in camera centre for an orthographic view of an already rotated shape.

    The camera looks along +z, so it sits at ``-distance_factor`` model
    diameters from the centroid on the z axis.
    """
    c = rotated_shape.mean(axis=1)
    diameter = np.linalg.norm(np.ptp(rotated_shape, axis=1))
    return c - np.array([0.0, 0.0, distance_factor * diameter])


def _inside_hull(points: np.ndarray, viewpoint: np.ndarray) -> bool:
    centroid = points.mean(axis=1)
    if np.linalg.norm(viewpoint - centroid) > np.linalg.norm(points - centroid[:, None], axis=0).max():
        return False
    try:
        hull = ConvexHull(points.T)
    except QhullError:
        return False
    return bool(np.all(hull.equations[:, :3] @ viewpoint + hull.equations[:, 3] <= 1e-12))


def resolve_gamma(gamma: float | None, n_points: int) -> float:
    if gamma is None:
        return max(float(np.log10(n_points)), MIN_AUTO_GAMMA)
    return float(gamma)


def hpr_visible(points, viewpoint, gamma: float | None = DEFAULT_GAMMA) -> VisibilityMask:
    """Hidden point removal for a ``(3, V)`` cloud seen from ``viewpoint``."""
    points = np.asarray(points, dtype=np.float64)
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    n = points.shape[1]
    gamma = resolve_gamma(gamma, max(n, 2))
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if n < 4:
        raise DegenerateGeometryError("hidden point removal needs at least 4 points")
    spread = np.linalg.svd(points - points.mean(axis=1, keepdims=True), compute_uv=False)
    if spread[2] <= COPLANAR_RTOL * spread[0]:
        raise DegenerateGeometryError("point cloud is coplanar")
    if _inside_hull(points, viewpoint):
        raise DegenerateGeometryError("viewpoint lies inside the point cloud")
    p = points.T - viewpoint
    norms = np.linalg.norm(p, axis=1)
    if np.any(norms == 0):
        raise DegenerateGeometryError("a point coincides with the viewpoint")
    radius = 10.0 ** gamma * norms.max()
    flipped = p + 2.0 * (radius - norms)[:, None] * p / norms[:, None]
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    except QhullError as exc:
        raise DegenerateGeometryError(f"degenerate point cloud for visibility: {exc}") from None
    visible = np.zeros(n, dtype=bool)
    idx = hull.vertices
    visible[idx[idx < n]] = True
    return VisibilityMask(visible, viewpoint, gamma)


def posed_visibility(shape, R, gamma: float | None = DEFAULT_GAMMA) -> tuple[np.ndarray, VisibilityMask]:
    """Rotate ``shape`` by ``R`` and run hidden point removal from the camera side.

    The returned mask's viewpoint is expressed back in the unrotated model frame.
    """
    R = np.asarray(R, dtype=np.float64)
    rotated = rotate_shape(shape, R)
    vp = orthographic_viewpoint(rotated)
    mask = hpr_visible(rotated, vp, gamma)
    c = rotated.mean(axis=1)
    mask.viewpoint = R.T @ (vp - c) + c
    return rotated, mask


def canthus_occluded(mask: VisibilityMask | np.ndarray, model: MorphableModel, k: int) -> tuple[bool, bool]:
    """Per eye: occluded when fewer than half of the canthus k-ring is visible."""
    visible = mask.visible if isinstance(mask, VisibilityMask) else np.asarray(mask, dtype=bool)
    out = []
    for seed in model.canthus_indices:
        ring = k_ring(model, int(seed), k)
        out.append(bool(visible[ring].sum() * 2 < ring.size))
    return out[0], out[1]


class MaskBank:
    """Pre-computed visibility masks over a grid of viewing directions.

    A mask depends only on where the camera sits in the model frame, the
    third row of ``R``; spin about the viewing axis leaves it unchanged. The
    direction is parameterised as ``Rx(pitch) @ Ry(yaw)`` and snapped to a
    ``step``-degree grid. Masks are built lazily and reused.
    """

    def __init__(self, shape, step: float = 5.0, gamma: float | None = DEFAULT_GAMMA):
        self.shape = np.asarray(shape, dtype=np.float64)
        self.step = float(step)
        self.gamma = gamma
        self._cache: dict[tuple[int, int], VisibilityMask] = {}

    @staticmethod
    def view_angles(R) -> tuple[float, float]:
        v = np.asarray(R)[2]
        pitch = np.degrees(np.arcsin(np.clip(v[1], -1.0, 1.0)))
        yaw = np.degrees(np.arctan2(-v[0], v[2]))
        return float(pitch), float(yaw)

    def _node(self, pitch: float, yaw: float) -> tuple[int, int]:
        return int(round(pitch / self.step)), int(round(yaw / self.step))

    def lookup(self, R) -> VisibilityMask:
        key = self._node(*self.view_angles(R))
        if key not in self._cache:
            R0 = rotation_from_euler(key[0] * self.step, key[1] * self.step, 0.0)
            self._cache[key] = posed_visibility(self.shape, R0, self.gamma)[1]
        return self._cache[key]

    def precompute(self, max_pitch: float = 60.0, max_yaw: float = 85.0) -> None:
        for p in np.arange(-max_pitch, max_pitch + 1e-9, self.step):
            for y in np.arange(-max_yaw, max_yaw + 1e-9, self.step):
                self.lookup(rotation_from_euler(p, y, 0.0))

    def __len__(self) -> int:
        return len(self._cache)


@lru_cache(maxsize=4)
def _bank_for(model: MorphableModel, step: float, gamma: float | None) -> MaskBank:
    return MaskBank(model.mean_shape, step, gamma)


def mask_bank(model: MorphableModel, step: float = 5.0, gamma: float | None = DEFAULT_GAMMA) -> MaskBank:
    return _bank_for(model, float(step), gamma)
