"""Camera frames, pinhole projection and the two oblique projectors.

Conventions: a pose ``(p, R)`` maps camera coordinates to world coordinates,
``w = R @ c + p``.  Relative motion ``(p12, R12)`` maps the first camera frame
to the second, ``c2 = R12 @ c1 + p12``.  Image points are normalized pinhole
coordinates (unit focal length, principal point at the origin).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dtm import SurfaceContact
from .errors import BehindCameraError, DegenerateProjectionError, GrazingIncidenceError

EPS_DEN = 1e-12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check(p, R, what):
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{what}: translation must be finite")
    if not is_rotation(R):
        raise ValueError(f"{what}: rotation is not orthonormal with det +1")


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _frozen(self.p).reshape(3))
        object.__setattr__(self, "R", _frozen(self.R).reshape(3, 3))
        _check(self.p, self.R, "Pose")

    def is_valid(self, tol=1e-10) -> bool:
        return is_rotation(self.R, tol)


@dataclass(frozen=True)
class RelativeMotion:
    p12: np.ndarray
    R12: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p12", _frozen(self.p12).reshape(3))
        object.__setattr__(self, "R12", _frozen(self.R12).reshape(3, 3))
        _check(self.p12, self.R12, "RelativeMotion")


def is_rotation(R, tol=1e-10) -> bool:
    R = np.asarray(R, dtype=float)
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


def homogeneous(u) -> np.ndarray:
    """Image point(s) ``(..., 2)`` to rays ``(..., 3)`` with unit third component."""
    u = np.asarray(u, dtype=float)
    return np.concatenate([u, np.ones(u.shape[:-1] + (1,))], axis=-1)


def world_to_camera(pose: Pose, g) -> np.ndarray:
    return pose.R.T @ (np.asarray(g, dtype=float) - pose.p)


def camera_to_world(pose: Pose, c) -> np.ndarray:
    return pose.R @ np.asarray(c, dtype=float) + pose.p


def project(g_cam) -> np.ndarray:
    """Pinhole projection of a camera-frame point onto the normalized image plane."""
    g_cam = np.asarray(g_cam, dtype=float)
    if not g_cam[2] > 0:
        raise BehindCameraError(f"point {g_cam.tolist()} is behind the camera (z <= 0)")
    return g_cam[:2] / g_cam[2]


def relative_motion(pose1: Pose, pose2: Pose) -> RelativeMotion:
    """Motion taking camera frame 1 into camera frame 2."""
    R12 = pose2.R.T @ pose1.R
    p12 = pose2.R.T @ (pose1.p - pose2.p)
    return RelativeMotion(p12, R12)


def second_pose(pose1: Pose, motion: RelativeMotion) -> Pose:
    """World pose of camera 2 given camera 1 and the relative motion."""
    R2 = pose1.R @ motion.R12.T
    p2 = pose1.p - R2 @ motion.p12
    return Pose(p2, R2)


def projection_operator(u, s, eps=EPS_DEN) -> np.ndarray:
    """Oblique projector ``I - u s^T / (s^T u)``.

    Projects onto the plane normal to ``s`` along ``u``; annihilates ``u`` and
    is annihilated by ``s^T``.
    """
    u = np.asarray(u, dtype=float)
    s = np.asarray(s, dtype=float)
    den = s @ u
    if abs(den) <= eps:
        raise DegenerateProjectionError(f"degenerate projection direction: s^T u = {den:.3e}")
    return np.eye(3) - np.outer(u, s) / den


def l_operator(q1, n, r1, eps=EPS_DEN) -> np.ndarray:
    """Projector onto the first-camera ray ``q1`` along the plane normal to ``n``.

    Satisfies ``r1 @ L + projection_operator(r1 @ q1, n) == I``.
    """
    q1 = np.asarray(q1, dtype=float)
    n = np.asarray(n, dtype=float)
    den = n @ (np.asarray(r1, dtype=float) @ q1)
    if abs(den) <= eps:
        raise GrazingIncidenceError(f"grazing incidence: N^T R1 q1 = {den:.3e}")
    return np.outer(q1, n) / den


def depth_from_plane(pose1: Pose, q1, contact: SurfaceContact, eps=EPS_DEN) -> float:
    """Depth along ``q1`` at which the first-camera ray meets the tangent plane."""
    n = contact.normal
    den = n @ (pose1.R @ np.asarray(q1, dtype=float))
    if abs(den) <= eps:
        raise GrazingIncidenceError(f"grazing incidence: N^T R1 q1 = {den:.3e}")
    return float((n @ contact.point - n @ pose1.p) / den)
