"""Exact triangle ray casting, used as the independent visibility oracle.

A vertex is visible from a viewpoint when the open segment between them
crosses no triangle that is not incident to the vertex. Candidate
(vertex, triangle) pairs are pruned with a gnomonic projection around the
viewing axis (lines stay lines, so a blocking triangle must contain the
vertex's projected direction); the final decision is a Moller-Trumbore test.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-9


def _segment_hits(orig, dirs, tri_pts, t_max=1.0):
    v0, v1, v2 = tri_pts
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = orig - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", dirs, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    return ok & (u >= -EPS) & (v >= -EPS) & (u + v <= 1 + EPS) & (t > 1e-7) & (t < t_max)


def _brute_force(points, faces, viewpoint, chunk=200_000):
    n_vert, n_tri = points.shape[0], faces.shape[0]
    hidden = np.zeros(n_vert, dtype=bool)
    tri = points[faces]
    per = max(1, chunk // max(n_tri, 1))
    for s in range(0, n_vert, per):
        idx = np.arange(s, min(s + per, n_vert))
        vi = np.repeat(idx, n_tri)
        ti = np.tile(np.arange(n_tri), len(idx))
        keep = ~np.any(faces[ti] == vi[:, None], axis=1)
        vi, ti = vi[keep], ti[keep]
        hits = _segment_hits(points[vi], viewpoint - points[vi],
                             (tri[ti, 0], tri[ti, 1], tri[ti, 2]))
        hidden[np.unique(vi[hits])] = True
    return ~hidden


def raycast_visible(points, faces, viewpoint, grid: int = 64) -> np.ndarray:
    """Visibility flags of ``(3, V)`` mesh vertices seen from ``viewpoint``."""
    points = np.asarray(points, dtype=np.float64).T.copy()
    faces = np.asarray(faces, dtype=np.int64)
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    rel = points - viewpoint
    axis = rel.mean(axis=0)
    axis /= np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    depth = rel @ axis
    if np.any(depth <= 1e-9 * np.abs(rel).max()):
        return _brute_force(points, faces, viewpoint)

    proj = np.stack([rel @ e1, rel @ e2], axis=1) / depth[:, None]
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    cell = (hi - lo).max() / grid + 1e-300
    vcell = np.floor((proj - lo) / cell).astype(np.int64)
    tri2d = proj[faces]  # (T, 3, 2)
    tlo = np.floor((tri2d.min(axis=1) - lo) / cell - 1e-9).astype(np.int64)
    thi = np.floor((tri2d.max(axis=1) - lo) / cell + 1e-9).astype(np.int64)
    width = grid + 2

    # enumerate (cell, triangle) pairs over each triangle's bbox
    spans = (thi - tlo + 1)
    counts = spans[:, 0] * spans[:, 1]
    tri_ids = np.repeat(np.arange(len(faces)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cx = tlo[tri_ids, 0] + offs % spans[tri_ids, 0]
    cy = tlo[tri_ids, 1] + offs // spans[tri_ids, 0]
    keys = (cx + 1) * width + (cy + 1)
    order = np.argsort(keys, kind="stable")
    keys, tri_ids = keys[order], tri_ids[order]

    vkeys = (vcell[:, 0] + 1) * width + (vcell[:, 1] + 1)
    start = np.searchsorted(keys, vkeys, side="left")
    stop = np.searchsorted(keys, vkeys, side="right")
    n = stop - start
    vi = np.repeat(np.arange(len(points)), n)
    ti = tri_ids[np.repeat(start, n) + (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n))]
    keep = ~np.any(faces[ti] == vi[:, None], axis=1)
    vi, ti = vi[keep], ti[keep]
    tri = points[faces]
    hits = _segment_hits(points[vi], viewpoint - points[vi], (tri[ti, 0], tri[ti, 1], tri[ti, 2]))
    visible = np.ones(len(points), dtype=bool)
    visible[vi[hits]] = False
    return visible
