"""Closed-form 3DMM fitting to 68 annotated 2D landmarks.

The model is deformed additively, ``S = m + sum_i alpha_i C_i``, and the
coefficients solve the ridge problem

    min_alpha ||X - Y alpha||^2 + lam * sum_i alpha_i^2 / mu_i

with ``X`` the landmark displacement left after projecting the current
shape and ``Y`` the projected component displacements at the landmarks.
Jaw-contour landmarks are excluded by default: their 3D correspondence
slides with pose, so they are used only for normalisation in evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .model import CONTOUR_SLICE, MorphableModel
from .pose import AffineProjection, HeadPose, Keypoints2D, decompose_rotation, estimate_affine, project

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.05
DEFAULT_ITERATIONS = 2
FIT_LANDMARKS = np.setdiff1d(np.arange(68), np.arange(68)[CONTOUR_SLICE])


class SingularSystemError(LinAlgError):
    pass


@dataclass
class DeformationCoefficients:
    alpha: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def to_dict(self) -> dict:
        return {"alpha": [float(a) for a in self.alpha], "lambda": float(self.lam)}


@dataclass
class FittedShape:
    vertices: np.ndarray  # (3, V)


def _landmark_rows(model: MorphableModel, landmarks) -> np.ndarray:
    idx = np.arange(68) if landmarks is None else np.asarray(landmarks)
    if idx.size and (idx.min() < 0 or idx.max() >= len(model.lm68_indices)):
        raise IndexError("landmark selection outside the 68-point set")
    return idx


def precompute_fit_system(model: MorphableModel, P: AffineProjection, l_gt, landmarks=None,
                          shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Displacement vector ``X`` (2L,) and projected component matrix ``Y`` (2L, K).

    Rows are interleaved per landmark: ``(x_1, y_1, x_2, y_2, ...)``. ``Y``
    applies only the linear part of ``P`` since components are displacements.
    """
    pts = l_gt.points if isinstance(l_gt, Keypoints2D) else np.asarray(l_gt, dtype=np.float64)
    if pts.shape != (2, 68):
        raise ValueError(f"expected 68 ground-truth landmarks, got {pts.shape}")
    rows = _landmark_rows(model, landmarks)
    verts = model.lm68_indices[rows]
    base = model.mean_shape if shape is None else np.asarray(shape)
    X = (pts[:, rows] - project(P, base[:, verts])).T.reshape(-1)
    comp = model.component_fields()[:, :, verts]  # (K, 3, L)
    Y = np.einsum("ij,kjl->lik", P.A, comp).reshape(2 * len(rows), model.n_components)
    return X, Y


def solve_coefficients(X, Y, reg_weights, lam: float = DEFAULT_LAMBDA) -> DeformationCoefficients:
    """Ridge solution ``(Y'Y + lam diag(1/mu))^-1 Y'X`` through a Cholesky solve."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    mu = np.asarray(reg_weights, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if np.any(mu <= 0):
        raise ValueError("regularisation weights must be strictly positive")
    K = Y.shape[1]
    if lam == 0 and np.linalg.matrix_rank(Y) < K:
        raise SingularSystemError("Y is rank deficient and lambda = 0; use lambda > 0")
    M = Y.T @ Y + lam * np.diag(1.0 / mu)
    try:
        alpha = cho_solve(cho_factor(M), Y.T @ X)
    except LinAlgError:
        raise SingularSystemError("normal equations are singular; use lambda > 0") from None
    return DeformationCoefficients(alpha, float(lam))


def deform(model: MorphableModel, alpha) -> FittedShape:
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.shape[0] != model.n_components:
        raise ValueError(f"expected {model.n_components} coefficients, got {alpha.shape[0]}")
    offset = (alpha @ model.components).reshape(3, model.n_vertices)
    return FittedShape(model.mean_shape + offset)


def reprojection_error(P: AffineProjection, shape, model: MorphableModel, l_gt, landmarks=None) -> float:
    """RMS pixel distance between projected landmark vertices and ``l_gt``."""
    pts = l_gt.points if isinstance(l_gt, Keypoints2D) else np.asarray(l_gt, dtype=np.float64)
    rows = _landmark_rows(model, landmarks)
    diff = pts[:, rows] - project(P, np.asarray(shape)[:, model.lm68_indices[rows]])
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=0))))


@dataclass
class FitResult:
    shape: FittedShape
    projection: AffineProjection
    pose: HeadPose
    coefficients: DeformationCoefficients
    errors: list[float]  # RMS reprojection error, initial first


def fit_landmarks(model: MorphableModel, l_gt, lam: float = DEFAULT_LAMBDA,
                  iterations: int = DEFAULT_ITERATIONS, landmarks=FIT_LANDMARKS) -> FitResult:
    """Alternate pose estimation and coefficient solving for ``iterations`` rounds.

    Each round estimates the camera on the current shape and re-solves the
    coefficients about the mean shape. A coefficient update that would raise
    the reprojection error under the current camera is rejected, so the
    error sequence never increases.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    pts = l_gt.points if isinstance(l_gt, Keypoints2D) else np.asarray(l_gt, dtype=np.float64)
    rows = _landmark_rows(model, landmarks)
    alpha = np.zeros(model.n_components)
    shape = model.mean_shape
    P = estimate_affine(pts[:, rows], shape[:, model.lm68_indices[rows]])
    errors = [reprojection_error(P, shape, model, pts, rows)]
    for it in range(iterations):
        if it > 0:
            P = estimate_affine(pts[:, rows], shape[:, model.lm68_indices[rows]])
        current = reprojection_error(P, shape, model, pts, rows)
        X, Y = precompute_fit_system(model, P, pts, rows)
        candidate = solve_coefficients(X, Y, model.reg_weights, lam).alpha
        new_shape = deform(model, candidate).vertices
        err = reprojection_error(P, new_shape, model, pts, rows)
        if err > current + 1e-9:
            log.debug("round %d: ridge update raised error %.3g -> %.3g, keeping previous", it, current, err)
            errors.append(current)
            break
        alpha, shape = candidate, new_shape
        errors.append(err)
    return FitResult(FittedShape(shape), P, decompose_rotation(P.A),
                     DeformationCoefficients(alpha, float(lam)), errors)
