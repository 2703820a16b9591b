"""Procedural face-like morphable models.

The reference 6704-vertex model is an external asset. For tests, demos and
timing we build a stand-in with the same container layout: an ellipsoidal
head cap with a nose ridge, eye sockets, brow, cheeks, lips and ears, a
smooth random deformation basis, and the 5 / 68 / 2 landmark annotations.

Surface points are parameterised by azimuth ``theta`` (positive towards image
right) and elevation ``phi`` (positive downwards), in radians.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import Delaunay

from .model import CONTOUR_SLICE, MorphableModel, make_model

THETA_RANGE = (-1.75, 1.75)
PHI_RANGE = (-0.95, 0.95)
AXES = (0.75, 1.0, 0.85)

EYE_THETA, EYE_PHI = 0.33, -0.22
CANTHUS_THETA, CANTHUS_PHI = 0.185, -0.20
NOSE_TIP_PHI = 0.12
EAR_THETA = 1.50


def _gauss(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def relief(theta, phi):
    """Outward displacement of facial features over the base ellipsoid."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    # nose: ramp from the bridge to the tip, then a short drop to the philtrum
    up = np.clip((phi + 0.36) / (NOSE_TIP_PHI + 0.36), 0.0, 1.0) ** 1.2
    down = np.clip(1.0 - ((phi - NOSE_TIP_PHI) / 0.13) ** 2, 0.0, 1.0)
    profile = np.where(phi <= NOSE_TIP_PHI, up, down)
    width = 0.10 + 0.05 * np.clip(phi + 0.2, 0.0, 0.4)
    d = 0.30 * profile * _gauss(theta, 0.0, width)
    d += 0.06 * _gauss(phi, -0.22, 0.14) * _gauss(theta, 0.0, 0.08)
    for side in (-1.0, 1.0):
        d -= 0.08 * _gauss(theta, side * EYE_THETA, 0.12) * _gauss(phi, EYE_PHI, 0.09)
        d += 0.035 * _gauss(theta, side * 0.52, 0.12) * _gauss(phi, 0.06, 0.10)
        d += 0.07 * _gauss(theta, side * EAR_THETA, 0.08) * _gauss(phi, 0.0, 0.16)
    d += 0.05 * _gauss(phi, -0.41, 0.06) * _gauss(theta, 0.0, 0.55)
    d += 0.03 * _gauss(phi, 0.46, 0.05) * _gauss(theta, 0.0, 0.22)
    d += 0.04 * _gauss(phi, 0.76, 0.08) * _gauss(theta, 0.0, 0.25)
    return d


def surface_points(theta, phi) -> np.ndarray:
    """Map parameter coordinates to ``(3, N)`` model-frame positions."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    a, b, c = AXES
    base = np.stack([a * np.sin(theta) * np.cos(phi),
                     b * np.sin(phi),
                     -c * np.cos(theta) * np.cos(phi)])
    normal = base / np.array([[a * a], [b * b], [c * c]])
    normal /= np.linalg.norm(normal, axis=0)
    return base + normal * relief(theta, phi)


def landmark_params() -> dict[str, np.ndarray]:
    """Parameter-space positions of the 5 keypoints, 68 landmarks and 2 canthi."""
    op = np.array([[-EYE_THETA, EYE_PHI], [EYE_THETA, EYE_PHI], [0.0, NOSE_TIP_PHI],
                   [-EAR_THETA, 0.0], [EAR_THETA, 0.0]])
    lm = []
    # jaw contour, image-left ear to image-right ear
    for s in np.linspace(-1.0, 1.0, 17):
        lm.append([1.15 * np.sin(s * np.pi / 2), -0.05 + 0.82 * np.cos(s * np.pi / 2) ** 0.8])
    for side in (-1.0, 1.0):  # brows, 5 points each, outer to inner on the left
        ts = np.linspace(0.58, 0.14, 5) if side < 0 else np.linspace(0.14, 0.58, 5)
        for t in ts:
            lm.append([side * t, -0.40 - 0.04 * np.sin(np.pi * (t - 0.14) / 0.44)])
    for p in np.linspace(-0.30, 0.02, 4):  # nose bridge
        lm.append([0.0, p])
    for t in np.linspace(-0.13, 0.13, 5):  # nostril base
        lm.append([t, 0.20 + 0.03 * (1 - abs(t) / 0.13)])

    def eye(center):
        w, h = 0.145, 0.035
        ang = [np.pi, 0.65 * np.pi, 0.35 * np.pi, 0.0, -0.35 * np.pi, -0.65 * np.pi]
        return [[center + w * np.cos(t), EYE_PHI - h * np.sin(t)] for t in ang]

    lm += eye(-EYE_THETA)
    lm += eye(EYE_THETA)
    # the corner points of the eye outlines are the inner canthi
    lm[39] = [-CANTHUS_THETA, CANTHUS_PHI]
    lm[42] = [CANTHUS_THETA, CANTHUS_PHI]
    outer = [np.pi * (1 - i / 6) for i in range(7)] + [-np.pi * i / 6 for i in range(1, 6)]
    for t in outer:  # outer lip, 12 points
        lm.append([0.26 * np.cos(t), 0.46 - 0.06 * np.sin(t)])
    for t in np.pi * np.array([1.0, 0.75, 0.5, 0.25, 0.0, -0.25, -0.5, -0.75]):  # inner lip
        lm.append([0.17 * np.cos(t), 0.46 - 0.025 * np.sin(t)])
    lm = np.array(lm)
    assert lm.shape == (68, 2)
    canthi = np.array([[-CANTHUS_THETA, CANTHUS_PHI], [CANTHUS_THETA, CANTHUS_PHI]])
    return {"op": op, "lm68": lm, "canthus": canthi}


def _r2_sequence(n: int) -> np.ndarray:
    g = 1.32471795724474602596
    alpha = np.array([1.0 / g, 1.0 / (g * g)])
    return np.mod(0.5 + np.outer(np.arange(1, n + 1), alpha), 1.0)


def _parameter_samples(n_vertices: int, fixed: np.ndarray) -> tuple[np.ndarray, bool]:
    (t0, t1), (p0, p1) = THETA_RANGE, PHI_RANGE
    span = np.array([t1 - t0, p1 - p0])
    include_fixed = n_vertices >= 4 * len(fixed)
    anchors = fixed if include_fixed else np.empty((0, 2))
    spacing = np.sqrt(span.prod() / n_vertices)
    pts = [anchors]
    count = len(anchors)
    batch = 2 * n_vertices
    start = 0
    while count < n_vertices:
        cand = _r2_sequence(start + batch)[start:] * span + np.array([t0, p0])
        start += batch
        if len(anchors):
            d = np.min(np.linalg.norm(cand[:, None, :] - anchors[None, :, :], axis=2), axis=1)
            cand = cand[d > 0.6 * spacing]
        take = cand[: n_vertices - count]
        pts.append(take)
        count += len(take)
    return np.concatenate(pts), include_fixed


def _smooth_basis(params: np.ndarray, n_components: int, rng: np.random.Generator) -> np.ndarray:
    theta, phi = params[:, 0], params[:, 1]
    fields = np.empty((n_components, 3, len(theta)))
    for i in range(n_components):
        field = np.zeros((3, len(theta)))
        for _ in range(3):
            ct, cp = rng.uniform(-0.9, 0.9), rng.uniform(-0.6, 0.8)
            width = rng.uniform(0.15, 0.4)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            bump = np.exp(-0.5 * ((theta - ct) ** 2 + (phi - cp) ** 2) / width ** 2)
            field += direction[:, None] * bump[None, :] * rng.choice([-1.0, 1.0])
        fields[i] = field
    return fields


def make_face_model(n_vertices: int = 1500, n_components: int = 10, seed: int = 0,
                    name: str | None = None) -> MorphableModel:
    """Build a deterministic face-like model with ``n_vertices`` vertices.

    Components are smooth random displacement fields with their best affine
    fit over the non-contour landmarks removed, so that deforming the shape
    never masquerades as a change of camera at those landmarks. Each field
    is scaled to a peak displacement of 0.05 model units; ``reg_weights``
    decay geometrically as prior variances.
    """
    if n_vertices < 10:
        raise ValueError("n_vertices must be at least 10")
    marks = landmark_params()
    fixed = np.concatenate([marks["op"], marks["lm68"], marks["canthus"]])
    fixed_unique, inverse = np.unique(np.round(fixed, 12), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    params, include_fixed = _parameter_samples(n_vertices, fixed_unique)

    scaled = params * np.array([AXES[0], AXES[1]])
    tri = Delaunay(scaled).simplices.astype(np.int64)
    vertices = surface_points(params[:, 0], params[:, 1])

    if include_fixed:
        fixed_idx = inverse
    else:
        d = np.linalg.norm(fixed[:, None, :] - params[None, :, :], axis=2)
        fixed_idx = np.argmin(d, axis=1)
    n_op, n_lm = len(marks["op"]), len(marks["lm68"])
    op_idx = fixed_idx[:n_op]
    lm_idx = fixed_idx[n_op:n_op + n_lm]
    ch_idx = fixed_idx[n_op + n_lm:]

    # consistent winding with outward normals (towards -z near the face centre)
    centre = int(np.argmin(np.linalg.norm(params, axis=1)))
    t = tri[np.any(tri == centre, axis=1)][0]
    p = vertices[:, t]
    if np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])[2] > 0:
        tri = tri[:, ::-1].copy()

    rng = np.random.default_rng(seed)
    fields = _smooth_basis(params, n_components, rng)
    fit_idx = np.unique(np.delete(lm_idx, np.arange(68)[CONTOUR_SLICE]))
    design = np.vstack([vertices[:, fit_idx], np.ones(len(fit_idx))])  # (4, L)
    full = np.vstack([vertices, np.ones(vertices.shape[1])])
    for i in range(n_components):
        coef, *_ = np.linalg.lstsq(design.T, fields[i][:, fit_idx].T, rcond=None)
        fields[i] -= coef.T @ full
        fields[i] *= 0.05 / np.max(np.linalg.norm(fields[i], axis=0))
    reg = 0.9 ** np.arange(n_components)
    return make_model(vertices, fields.reshape(n_components, -1), reg, tri,
                      op_idx, lm_idx, ch_idx,
                      name=name or f"face{n_vertices}k{n_components}s{seed}")


@lru_cache(maxsize=8)
def cached_face_model(n_vertices: int = 1500, n_components: int = 10, seed: int = 0) -> MorphableModel:
    """Memoised :func:`make_face_model`; models are immutable so sharing is safe."""
    return make_face_model(n_vertices, n_components, seed)


def tiny_model() -> MorphableModel:
    """The bundled ~50-vertex test model."""
    from importlib.resources import files

    from .model import load_model

    return load_model(files("canthus") / "data" / "tiny_face.json")


def tetrahedron_model() -> MorphableModel:
    """Smallest closed mesh: 4 vertices, 1 component."""
    verts = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    faces = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    comp = np.zeros((1, 3, 4))
    comp[0, 2, 3] = 1.0
    return make_model(verts, comp, [1.0], faces, [0, 1, 2, 3, 0], [0] * 68, [1, 2], name="tetrahedron")
