"""Affine orthographic camera estimation, rotation extraction and Euler angles.

Euler convention: intrinsic X-Y-Z, ``R = Rx(pitch) @ Ry(yaw) @ Rz(roll)``,
angles in degrees. With the model frame (x right, y down, z away from the
camera), pitch nods the head, yaw turns it left/right, roll is in-plane.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import OP_LABELS

PINV_RTOL = 1e-10
MAX_ROW_CONDITION = 1e8
GIMBAL_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    """Landmark configuration or view cannot determine the camera."""


@dataclass
class Keypoints2D:
    points: np.ndarray  # (2, N) pixels
    labels: list[str] | None = None
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] != 2:
            if self.points.ndim == 2 and self.points.shape[1] == 2:
                self.points = self.points.T.copy()
            else:
                raise ValueError(f"keypoints must be 2 x N, got {self.points.shape}")
        n = self.n
        if n not in (5, 68):
            raise ValueError(f"expected 5 or 68 keypoints, got {n}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("keypoint coordinates must be finite")
        if self.labels is None and n == 5:
            self.labels = list(OP_LABELS)
        if self.labels is not None:
            self.labels = list(self.labels)
            if len(self.labels) != n or len(set(self.labels)) != n:
                raise ValueError("labels must be unique and one per point")
        if self.confidence is None:
            self.confidence = np.ones(n)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if self.confidence.shape != (n,) or np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidence must hold one value in [0, 1] per point")

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "points": self.points.T.tolist(),
            "labels": None if self.n == 68 else self.labels,
            "confidence": self.confidence.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Keypoints2D":
        pts = np.asarray(doc["points"], dtype=np.float64)
        if "n" in doc and pts.shape[0] != doc["n"]:
            raise ValueError(f"'n' is {doc['n']} but {pts.shape[0]} points given")
        return cls(pts.T, labels=doc.get("labels"), confidence=doc.get("confidence"))


def load_keypoints(path) -> Keypoints2D:
    return Keypoints2D.from_dict(json.loads(Path(path).read_text()))


def save_keypoints(kp: Keypoints2D, path) -> None:
    Path(path).write_text(json.dumps(kp.to_dict()))


@dataclass
class AffineProjection:
    A: np.ndarray  # (2, 3)
    t: np.ndarray  # (2,)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(2, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.t))):
            raise ValueError("projection parameters must be finite")

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "AffineProjection":
        return cls(doc["A"], doc["t"])


@dataclass
class HeadPose:
    R: np.ndarray
    scale: float = 1.0
    euler: tuple[float, float, float] = field(default=None)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.euler is None:
            self.euler = euler_from_rotation(self.R)
        self.euler = tuple(float(a) for a in self.euler)

    @property
    def pitch(self) -> float:
        return self.euler[0]

    @property
    def yaw(self) -> float:
        return self.euler[1]

    @property
    def roll(self) -> float:
        return self.euler[2]

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "scale": self.scale,
                "euler": {"pitch": self.euler[0], "yaw": self.euler[1], "roll": self.euler[2]}}

    @classmethod
    def from_dict(cls, doc: dict) -> "HeadPose":
        e = doc.get("euler")
        euler = None if e is None else (e["pitch"], e["yaw"], e["roll"])
        return cls(doc["R"], doc.get("scale", 1.0), euler)


def rot_x(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    return rot_x(pitch) @ rot_y(yaw) @ rot_z(roll)


def euler_from_rotation(R) -> tuple[float, float, float]:
    """(pitch, yaw, roll) in degrees for ``R = Rx @ Ry @ Rz``.

    At gimbal lock (|yaw| = 90) roll is set to 0 and pitch absorbs the
    in-plane component.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = float(np.clip(R[0, 2], -1.0, 1.0))
    yaw = np.degrees(np.arcsin(sy))
    if abs(sy) < 1.0 - GIMBAL_EPS:
        pitch = np.degrees(np.arctan2(-R[1, 2], R[2, 2]))
        roll = np.degrees(np.arctan2(-R[0, 1], R[0, 0]))
    else:
        roll = 0.0
        if sy > 0:
            pitch = np.degrees(np.arctan2(R[1, 0], R[1, 1]))
        else:
            pitch = np.degrees(np.arctan2(-R[1, 0], R[1, 1]))
    return float(pitch), float(yaw), float(roll)


def _pinv(M: np.ndarray) -> np.ndarray:
    """Pseudo-inverse via SVD, also returning the numerical rank."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > PINV_RTOL * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T, int(keep.sum())


def estimate_affine(l2d, L3d, confidence=None, min_confidence: float = 0.0,
                    require_full_rank: bool = False) -> AffineProjection:
    """Least-squares affine camera ``l2d ~ A @ L3d + t``.

    Both point sets are mean-centred, ``A = l_c @ pinv(L_c)``, and ``t`` is the
    mean residual, which is the global least-squares optimum. Points whose
    confidence is below ``min_confidence`` are dropped first.
    """
    if isinstance(l2d, Keypoints2D):
        if confidence is None:
            confidence = l2d.confidence
        l2d = l2d.points
    l2d = np.asarray(l2d, dtype=np.float64)
    L3d = np.asarray(L3d, dtype=np.float64)
    if l2d.shape[0] != 2 or L3d.shape[0] != 3 or l2d.shape[1] != L3d.shape[1]:
        raise ValueError(f"shape mismatch: 2D {l2d.shape} vs 3D {L3d.shape}")
    if confidence is not None:
        keep = np.asarray(confidence) >= min_confidence
        l2d, L3d = l2d[:, keep], L3d[:, keep]
    if l2d.shape[1] < 4:
        raise DegenerateGeometryError(f"need at least 4 usable keypoints, have {l2d.shape[1]}")
    lm, Lm = l2d.mean(axis=1, keepdims=True), L3d.mean(axis=1, keepdims=True)
    pinv, rank = _pinv(L3d - Lm)
    if rank < 2 or (require_full_rank and rank < 3):
        raise DegenerateGeometryError(f"3D landmarks are rank deficient (rank {rank})")
    A = (l2d - lm) @ pinv
    t = (lm - A @ Lm).ravel()
    return AffineProjection(A, t)


def project(P: AffineProjection, points) -> np.ndarray:
    """Project ``(3, M)`` points to ``(2, M)`` pixels."""
    points = np.asarray(points, dtype=np.float64)
    return P.A @ points + P.t[:, None]


def decompose_rotation(A) -> HeadPose:
    """Scale and rotation from an affine camera ``A ~ s * R[:2]``.

    The rows of ``A`` are orthonormalised through a QR factorisation of
    ``A.T`` (row 1 keeps its direction), the third row is their cross product.
    """
    A = np.asarray(A, dtype=np.float64).reshape(2, 3)
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms == 0) or np.linalg.cond(A) > MAX_ROW_CONDITION:
        raise DegenerateGeometryError("affine camera rows are (nearly) parallel: degenerate view")
    Q, Rq = np.linalg.qr(A.T)
    Q = Q * np.sign(np.diag(Rq))[None, :]
    r1, r2 = Q[:, 0], Q[:, 1]
    R = np.vstack([r1, r2, np.cross(r1, r2)])
    if np.linalg.det(R) < 0:
        R[2] *= -1
    return HeadPose(R=R, scale=float(norms.mean()))


def pose_from_rotation(R, scale: float = 1.0) -> HeadPose:
    return HeadPose(R=np.asarray(R, dtype=np.float64), scale=scale)


def fit_pose(l2d, L3d, **kwargs) -> tuple[AffineProjection, HeadPose]:
    """Estimate the camera and decompose it in one step."""
    P = estimate_affine(l2d, L3d, **kwargs)
    return P, decompose_rotation(P.A)


def wrap_angle(deg):
    """Map degrees to [-180, 180)."""
    return (np.asarray(deg) + 180.0) % 360.0 - 180.0
