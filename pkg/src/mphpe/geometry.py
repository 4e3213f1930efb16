"""Rotation, Euler-angle, wrapped-angle, similarity and pinhole primitives.

Conventions used throughout the package:

* Camera frame follows OpenCV: x right, y down, z forward (optical axis).
* Euler angles are degrees. ``R = Rx(pitch) @ Ry(yaw) @ Rz(roll)`` acting on
  column vectors, so yaw is the middle axis and the decomposition is singular
  at ``|yaw| = 90``.
* Pitch and roll live in (-90, 90); yaw is full range (-180, 180].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GIMBAL_EPS = 1e-7
ORTHO_TOL = 1e-6
BEHIND_EPS = 1e-6


class GeometryError(ValueError):
    """Base class for geometric precondition failures."""


class InvalidRotationError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class OutOfRangeError(GeometryError):
    """Rotation has no decomposition with both pitch and roll in (-90, 90)."""


@dataclass(frozen=True)
class EulerPose:
    """Head orientation in degrees.

    ``gimbal`` is set by :func:`matrix_to_euler` when the decomposition hit the
    yaw = +-90 singularity and had to pick a canonical branch.
    """

    pitch: float
    yaw: float
    roll: float
    gimbal: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("pitch", "yaw", "roll"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if not -90.0 < self.pitch < 90.0:
            raise ValueError(f"pitch {self.pitch} outside (-90, 90)")
        if not -90.0 < self.roll < 90.0:
            raise ValueError(f"roll {self.roll} outside (-90, 90)")
        if not -180.0 < self.yaw <= 180.0:
            raise ValueError(f"yaw {self.yaw} outside (-180, 180]")

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll], dtype=np.float64)

    @classmethod
    def from_array(cls, values, gimbal: bool = False) -> "EulerPose":
        p, y, r = (float(v) for v in values)
        return cls(p, y, r, gimbal)


# Range constant used to normalise each angle: pitch, yaw, roll.
ANGLE_RANGES = np.array([180.0, 360.0, 180.0])


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with world->camera extrinsics ``X_cam = R X + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        check_rotation(rot)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def extrinsic(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "R": self.rotation.tolist(), "t": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d.get("R", np.eye(3)), dtype=np.float64),
                   np.asarray(d.get("t", np.zeros(3)), dtype=np.float64))


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidRotationError("rotation must be a finite 3x3 matrix")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise InvalidRotationError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3g})")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidRotationError("matrix is a reflection (det != +1)")


def rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(pose: EulerPose) -> np.ndarray:
    return rot_x(pose.pitch) @ rot_y(pose.yaw) @ rot_z(pose.roll)


def matrix_to_euler(r: np.ndarray) -> EulerPose:
    """Decompose ``r`` into (pitch, yaw, roll) with pitch, roll in (-90, 90).

    Only half of SO(3) is reachable with pitch and roll both inside
    (-90, 90); the rest (heads turned upside down) raise
    :class:`OutOfRangeError`.

    Raises:
        InvalidRotationError: if ``r`` is not a proper rotation within 1e-6.
    """
    r = np.asarray(r, dtype=np.float64)
    check_rotation(r)
    sin_yaw = float(np.clip(r[0, 2], -1.0, 1.0))
    # |cos yaw| from the last column; its sign follows R00 and R22 since
    # cos(pitch) and cos(roll) are both positive on the chosen branch.
    abs_cos = math.hypot(r[1, 2], r[2, 2])
    if abs_cos < GIMBAL_EPS:
        return _gimbal_branch(r, sin_yaw)
    ref = r[2, 2] if abs(r[2, 2]) >= abs(r[0, 0]) else r[0, 0]
    sign = 1.0 if ref >= 0 else -1.0
    if r[0, 0] * r[2, 2] < 0 and min(abs(r[0, 0]), abs(r[2, 2])) > 1e-12:
        raise OutOfRangeError("rotation needs |pitch| or |roll| >= 90 on every branch")
    yaw = math.degrees(math.atan2(sin_yaw, sign * abs_cos))
    pitch = math.degrees(math.atan2(-sign * r[1, 2], sign * r[2, 2]))
    roll = math.degrees(math.atan2(-sign * r[0, 1], sign * r[0, 0]))
    return EulerPose(pitch, wrap_angle(yaw), roll)


def _gimbal_branch(r: np.ndarray, sin_yaw: float) -> EulerPose:
    # At yaw = +-90 only pitch +- roll is observable.
    yaw = 90.0 if sin_yaw > 0 else -90.0
    total = math.degrees(math.atan2(r[1, 0], r[1, 1]))
    if sin_yaw < 0:
        total = -total
    total = wrap_angle(total)
    if abs(total) < 90.0:
        pitch, roll = total, 0.0
    else:
        # Not representable with roll = 0 inside (-90, 90); split evenly.
        pitch = total / 2.0
        roll = pitch if sin_yaw > 0 else -pitch
    return EulerPose(pitch, yaw, roll, gimbal=True)


def wrap_angle(a: float) -> float:
    """Map ``a`` (degrees) into (-180, 180]."""
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a}")
    w = math.fmod(a, 360.0)
    if w <= -180.0:
        w += 360.0
    elif w > 180.0:
        w -= 360.0
    return w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("angles must be finite")
    w = np.fmod(a, 360.0)
    w = np.where(w <= -180.0, w + 360.0, w)
    return np.where(w > 180.0, w - 360.0, w)


def angular_abs_diff(a, b):
    """Geodesic distance on the circle in degrees, in [0, 180].

    Works on scalars and broadcasts over arrays.
    """
    d = np.abs(np.fmod(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), 360.0))
    out = np.minimum(d, 360.0 - d)
    return float(out) if out.ndim == 0 else out


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (y * x + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (z * x - w * y), 2 * (z * y + w * x), w * w - x * x - y * y + z * z],
    ])


def horn_align(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Closed-form similarity ``dst ~ s R src + t`` via unit quaternions.

    Args:
        src, dst: (N, 3) corresponding points, N >= 3.

    Returns:
        The least-squares optimal similarity transform.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"point sets must both be (N, 3); got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError("need at least 3 point pairs")

    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0.0 or sv[1] / sv[0] < 1e-9:
        raise DegenerateConfigurationError("source points are collinear or coincident")

    m = a.T @ b
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    _, vecs = np.linalg.eigh(n)
    q = vecs[:, -1]
    rot = _quat_to_matrix(q / np.linalg.norm(q))
    scale = float(np.sum(b * (a @ rot.T)) / np.sum(a * a))
    if not scale > 0:
        raise DegenerateConfigurationError("alignment produced a non-positive scale")
    return SimilarityTransform(scale, rot, mu_d - scale * rot @ mu_s)


def project_points(cam: CameraModel, pts: np.ndarray) -> np.ndarray:
    """Pinhole projection of world points to pixels, shape (N, 2)."""
    pc = cam.to_camera(np.atleast_2d(pts))
    z = pc[:, 2]
    if np.any(z <= BEHIND_EPS):
        raise BehindCameraError(f"{int(np.sum(z <= BEHIND_EPS))} point(s) at or behind the camera plane")
    return np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
