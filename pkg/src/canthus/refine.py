"""Canthus regions on the image and warmest-pixel refinement.

A region is the 2D convex hull of the projected k-ring around an annotated
canthus vertex. Pixels are addressed by integer centres ``(x=col, y=row)``
and belong to a polygon when they lie inside or on its boundary; the same
rule is used for refinement and for IoU scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .imageio import ThermalImage
from .model import MorphableModel, k_ring
from .pose import AffineProjection, project

EYES = ("left", "right")
DEFAULT_SIGMA = 1.5
DEFAULT_K = 3
INSIDE_EPS = 1e-9


class DegenerateRegionError(ValueError):
    pass


class OutOfFrameError(ValueError):
    pass


# --------------------------------------------------------------------------
# smoothing


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1D Gaussian truncated at +-ceil(3 sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(img: ThermalImage, sigma: float = DEFAULT_SIGMA) -> ThermalImage:
    """Separable Gaussian blur with border replication. ``sigma = 0`` is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img
    kernel = gaussian_kernel(sigma)
    data = np.asarray(img.data, dtype=np.float64)
    data = correlate1d(data, kernel, axis=0, mode="nearest")
    data = correlate1d(data, kernel, axis=1, mode="nearest")
    return ThermalImage(data, img.intensity_map)


# --------------------------------------------------------------------------
# polygons


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> np.ndarray:
    """Monotone-chain hull of ``(N, 2)`` points, counter-clockwise in (x, y), no collinear vertices."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(polygon) -> float:
    x, y = np.asarray(polygon, dtype=np.float64).T
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_polygon(polygon, xy) -> np.ndarray:
    """Half-plane test of ``(N, 2)`` points against a CCW convex polygon; boundary counts as inside."""
    poly = np.asarray(polygon, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    inside = np.ones(len(xy), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        edge = b - a
        scale = max(np.hypot(*edge), 1.0)
        cross = edge[0] * (xy[:, 1] - a[1]) - edge[1] * (xy[:, 0] - a[0])
        inside &= cross >= -INSIDE_EPS * scale
    return inside


def polygon_mask(polygon, height: int, width: int) -> np.ndarray:
    """Boolean ``(height, width)`` raster of pixel centres inside the polygon."""
    mask = np.zeros((height, width), dtype=bool)
    poly = np.asarray(polygon, dtype=np.float64)
    x0 = max(int(np.ceil(poly[:, 0].min() - 1e-9)), 0)
    x1 = min(int(np.floor(poly[:, 0].max() + 1e-9)), width - 1)
    y0 = max(int(np.ceil(poly[:, 1].min() - 1e-9)), 0)
    y1 = min(int(np.floor(poly[:, 1].max() + 1e-9)), height - 1)
    if x1 < x0 or y1 < y0:
        return mask
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    inside = points_in_polygon(poly, np.stack([xs.ravel(), ys.ravel()], axis=1))
    mask[y0:y1 + 1, x0:x1 + 1] = inside.reshape(ys.shape)
    return mask


# --------------------------------------------------------------------------
# regions and refinement


@dataclass
class CanthusRegion:
    eye: str
    center: np.ndarray  # (2,) projected canthus vertex, pixels
    polygon: np.ndarray  # (n, 2) CCW convex polygon, pixels
    k: int

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)

    def mask(self, height: int, width: int) -> np.ndarray:
        return polygon_mask(self.polygon, height, width)

    def to_dict(self) -> dict:
        return {"eye": self.eye, "k": int(self.k), "center": [float(v) for v in self.center],
                "polygon": [[float(x), float(y)] for x, y in self.polygon]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CanthusRegion":
        return cls(doc["eye"], np.asarray(doc["center"], dtype=float),
                   np.asarray(doc["polygon"], dtype=float).reshape(-1, 2), int(doc["k"]))


def eye_index(eye: str) -> int:
    try:
        return EYES.index(eye)
    except ValueError:
        raise ValueError(f"eye must be one of {EYES}, got {eye!r}") from None


def extract_region(model: MorphableModel, P: AffineProjection, eye: str, k: int = DEFAULT_K,
                   shape=None) -> CanthusRegion:
    """Project the canthus k-ring of ``shape`` (default: mean shape) and take its convex hull."""
    if not 0 <= k <= 8:
        raise ValueError("k-ring radius outside the supported range")
    verts = model.mean_shape if shape is None else np.asarray(shape)
    seed = int(model.canthus_indices[eye_index(eye)])
    ring = k_ring(model, seed, k)
    pts = project(P, verts[:, ring]).T
    hull = convex_hull_2d(pts)
    if len(hull) < 3 or abs(polygon_area(hull)) <= 1e-12:
        raise DegenerateRegionError(f"{eye} canthus region collapses to fewer than 3 distinct points")
    center = project(P, verts[:, [seed]])[:, 0]
    return CanthusRegion(eye, center, hull, k)


def pixel_value(img: ThermalImage, xy) -> float:
    """Value at the pixel nearest to ``xy``, clamped to the frame."""
    x = int(np.clip(np.round(xy[0]), 0, img.width - 1))
    y = int(np.clip(np.round(xy[1]), 0, img.height - 1))
    return float(img.data[y, x])


def refine_canthus(img: ThermalImage, region: CanthusRegion, sigma: float = DEFAULT_SIGMA,
                   smoothed: ThermalImage | None = None) -> tuple[np.ndarray, float]:
    """Warmest smoothed pixel inside the region; ties go to the first in row-major order.

    Pass ``smoothed`` to reuse one blurred frame for both eyes.
    """
    if smoothed is None:
        smoothed = gaussian_smooth(img, sigma)
    mask = region.mask(img.height, img.width)
    if not mask.any():
        raise OutOfFrameError(f"{region.eye} canthus region does not intersect the image")
    values = np.where(mask, np.asarray(smoothed.data, dtype=np.float64), -np.inf)
    flat = int(np.argmax(values))
    row, col = divmod(flat, img.width)
    return np.array([float(col), float(row)]), float(values[row, col])


@dataclass
class EyeAnnotation:
    region: CanthusRegion
    occluded: bool = False
    refined_point: np.ndarray | None = None
    peak_intensity: float | None = None
    peak_celsius: float | None = None

    def to_dict(self) -> dict:
        return {
            "region": self.region.to_dict(),
            "occluded": bool(self.occluded),
            "refined_point": None if self.refined_point is None else [float(v) for v in self.refined_point],
            "peak_intensity": self.peak_intensity,
            "peak_celsius": self.peak_celsius,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EyeAnnotation":
        pt = doc.get("refined_point")
        return cls(CanthusRegion.from_dict(doc["region"]), bool(doc.get("occluded", False)),
                   None if pt is None else np.asarray(pt, dtype=float),
                   doc.get("peak_intensity"), doc.get("peak_celsius"))


@dataclass
class CanthusAnnotation:
    left: EyeAnnotation
    right: EyeAnnotation

    def eyes(self) -> tuple[EyeAnnotation, EyeAnnotation]:
        return self.left, self.right

    def to_dict(self) -> dict:
        return {"left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "CanthusAnnotation":
        return cls(EyeAnnotation.from_dict(doc["left"]), EyeAnnotation.from_dict(doc["right"]))


def annotate_eyes(img: ThermalImage, regions, occluded, sigma: float = DEFAULT_SIGMA,
                  smoothed: ThermalImage | None = None) -> CanthusAnnotation:
    """Refine every non-occluded eye; occluded eyes keep their region and no point."""
    if smoothed is None:
        smoothed = gaussian_smooth(img, sigma)
    out = []
    for region, occ in zip(regions, occluded):
        ann = EyeAnnotation(region, bool(occ))
        if not occ:
            point, peak = refine_canthus(img, region, sigma, smoothed)
            ann.refined_point, ann.peak_intensity = point, peak
            c = img.celsius(peak)
            ann.peak_celsius = None if c is None else float(c)
        out.append(ann)
    return CanthusAnnotation(*out)
