#!/usr/bin/env python3
"""
📐 PROJECTIVE GEOMETRY
Quaternion rotations, the collinearity projection, two-ray spatial intersection
and rigid point-set alignment.

Conventions:
- A Pose maps phantom coordinates into the camera frame: X_c = R (P - T), where
  T is the perspective center (X-ray source) in the phantom frame and R is the
  rotation of the unit quaternion q (R v == q v q^c).
- The principal ray runs along -Z of the camera frame, so visible points have
  W < 0 and the per-ray scale mu = c / (-W) is positive.
- Image coordinates: x = x_p + dx + mu * U, y = y_p + dy + mu * V.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

try:
    from .calibration_errors import (
        PointBehindCamera, DegenerateRays, DegenerateConfiguration
    )
    from .utils.config import POINT_BEHIND_EPSILON
except ImportError:
    from calibration_errors import (
        PointBehindCamera, DegenerateRays, DegenerateConfiguration
    )
    from utils.config import POINT_BEHIND_EPSILON

logger = logging.getLogger(__name__)

MIN_RAY_ANGLE = 1e-6  # rad

ArrayLike = Union[Sequence[float], np.ndarray]


@dataclass(frozen=True)
class Quaternion:
    """Rotation quaternion (w, x, y, z), Hamilton convention"""
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values: ArrayLike) -> "Quaternion":
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike) -> "Quaternion":
        x, y, z, w = Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat()
        return cls(float(w), float(x), float(y), float(z)).canonical()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Quaternion":
        x, y, z, w = Rotation.from_matrix(np.asarray(matrix, dtype=float)).as_quat()
        return cls(float(w), float(x), float(y), float(z)).canonical()

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise DegenerateConfiguration("Cannot normalize a zero quaternion")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def canonical(self) -> "Quaternion":
        """Same rotation with w >= 0"""
        if self.w < 0.0:
            return Quaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def to_matrix(self) -> np.ndarray:
        return quaternion_to_matrix_array(self.as_array()[None, :])[0]

    def rotate(self, vector: ArrayLike) -> np.ndarray:
        """q v q^c"""
        return self.to_matrix() @ np.asarray(vector, dtype=float)

    def exp_update(self, delta: ArrayLike) -> "Quaternion":
        """Left-multiplicative tangent update exp(delta) * q, renormalized"""
        return (Quaternion.from_rotvec(delta) * self).normalized().canonical()

    def is_close(self, other: "Quaternion", tol: float = 1e-12) -> bool:
        a = self.normalized().canonical().as_array()
        b = other.normalized().canonical().as_array()
        return bool(np.max(np.abs(a - b)) <= tol)


@dataclass(frozen=True, eq=False)
class Pose:
    """Exterior orientation: X_c = R(q) (P - translation)"""
    translation: np.ndarray
    rotation: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", self.rotation.normalized())

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), Quaternion.identity())

    @classmethod
    def from_rt(cls, rotation_matrix: np.ndarray, t: ArrayLike) -> "Pose":
        """Pose for the map X -> R X + t"""
        R = np.asarray(rotation_matrix, dtype=float)
        return cls(-R.T @ np.asarray(t, dtype=float), Quaternion.from_matrix(R))

    @property
    def matrix(self) -> np.ndarray:
        return self.rotation.to_matrix()

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def transform(self, points: ArrayLike) -> np.ndarray:
        """Map points (n, 3) or (3,) into this pose's frame"""
        P = np.asarray(points, dtype=float)
        return (P - self.translation) @ self.matrix.T

    def compose(self, other: "Pose") -> "Pose":
        """Apply self, then other"""
        R_self = self.matrix
        translation = self.translation + R_self.T @ other.translation
        return Pose(translation, (other.rotation * self.rotation).normalized().canonical())

    def inverse(self) -> "Pose":
        return Pose(-self.matrix @ self.translation, self.rotation.conjugate().canonical())

    def is_close(self, other: "Pose", tol: float = 1e-10) -> bool:
        return (np.max(np.abs(self.translation - other.translation)) <= tol
                and self.rotation.is_close(other.rotation, tol))


@dataclass(frozen=True)
class Intrinsics:
    """Interior orientation in pixels"""
    x_p: float
    y_p: float
    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise DegenerateConfiguration(f"Principal distance must be positive, got {self.c}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_p, self.y_p, self.c])

    @classmethod
    def from_array(cls, values: ArrayLike) -> "Intrinsics":
        x_p, y_p, c = (float(v) for v in values)
        return cls(x_p, y_p, c)


@dataclass(frozen=True, eq=False)
class ObjectPoint:
    id: object
    position: np.ndarray

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(position)):
            raise DegenerateConfiguration(f"Object point {self.id} has non-finite coordinates")
        object.__setattr__(self, "position", position)


@dataclass(frozen=True)
class ImagePoint:
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ProjectionJacobian:
    """Partials of (x, y) for one projection, each block 2 x 3"""
    d_point: np.ndarray
    d_translation: np.ndarray
    d_rotation: np.ndarray
    d_intrinsics: np.ndarray

    def as_matrix(self) -> np.ndarray:
        """2 x 12 in the order point, translation, rotation tangent, (x_p, y_p, c)"""
        return np.hstack([self.d_point, self.d_translation, self.d_rotation, self.d_intrinsics])


@dataclass(frozen=True)
class Alignment:
    """Rigid transform source -> target plus the residual RMSE"""
    pose: Pose
    rmse: float

    def apply(self, points: ArrayLike) -> np.ndarray:
        return self.pose.transform(points)


# ---------------------------------------------------------------------------
# Vectorized kernels
# ---------------------------------------------------------------------------

def skew(vectors: np.ndarray) -> np.ndarray:
    """Cross-product matrices [v]x for (n, 3) or (3,) input"""
    v = np.asarray(vectors, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out[0] if single else out


def quaternion_to_matrix_array(quaternions: np.ndarray) -> np.ndarray:
    """(n, 4) wxyz unit quaternions -> (n, 3, 3) rotation matrices"""
    q = np.asarray(quaternions, dtype=float)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_exp_update_array(quaternions: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """exp(delta_i) * q_i for (n, 4) wxyz quaternions and (n, 3) tangents, canonical w >= 0"""
    q = np.asarray(quaternions, dtype=float)
    if q.shape[0] == 0:
        return q.copy()
    current = Rotation.from_quat(q[:, [1, 2, 3, 0]])
    updated = (Rotation.from_rotvec(np.asarray(deltas, dtype=float)) * current).as_quat()
    out = updated[:, [3, 0, 1, 2]]
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out[out[:, 0] < 0] *= -1.0
    return out


def camera_coordinates(points: np.ndarray, rotations: np.ndarray, translations: np.ndarray) -> np.ndarray:
    """X_c = R (P - T) row-wise; rotations (n, 3, 3)"""
    return np.einsum("nij,nj->ni", rotations, points - translations)


def check_in_front(camera_points: np.ndarray, epsilon: float = POINT_BEHIND_EPSILON):
    W = camera_points[:, 2]
    bad = W >= -epsilon
    if np.any(bad):
        raise PointBehindCamera(float(W[bad].max()),
                                f"{int(bad.sum())} point(s) not in front of the camera (max W = {W[bad].max():.6g} mm)")


def project_array(camera_points: np.ndarray, intrinsics: np.ndarray, corrections: np.ndarray) -> np.ndarray:
    """Project camera-frame points (n, 3) with per-row intrinsics (n, 3) and corrections (n, 2)"""
    check_in_front(camera_points)
    mu = intrinsics[:, 2] / (-camera_points[:, 2])
    return intrinsics[:, :2] + corrections + mu[:, None] * camera_points[:, :2]


def project_jacobian_array(camera_points: np.ndarray, intrinsics: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Partials of the image coordinates for each row.

    Returns:
        (d_camera (n, 2, 3), d_intrinsics (n, 2, 3)) where d_camera is taken
        w.r.t. the camera-frame coordinates (U, V, W).
    """
    check_in_front(camera_points)
    U, V, W = camera_points[:, 0], camera_points[:, 1], camera_points[:, 2]
    c = intrinsics[:, 2]
    n = camera_points.shape[0]
    d_camera = np.zeros((n, 2, 3))
    d_camera[:, 0, 0] = -c / W
    d_camera[:, 0, 2] = c * U / (W * W)
    d_camera[:, 1, 1] = -c / W
    d_camera[:, 1, 2] = c * V / (W * W)
    d_intrinsics = np.zeros((n, 2, 3))
    d_intrinsics[:, 0, 0] = 1.0
    d_intrinsics[:, 1, 1] = 1.0
    d_intrinsics[:, 0, 2] = -U / W
    d_intrinsics[:, 1, 2] = -V / W
    return d_camera, d_intrinsics


def back_project(image_points: np.ndarray, rotations: np.ndarray, translations: np.ndarray,
                 intrinsics: np.ndarray, corrections: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Rays (origin, unit direction) in the phantom frame for (n, 2) image points"""
    xy = np.asarray(image_points, dtype=float)
    if corrections is None:
        corrections = np.zeros_like(xy)
    local = np.column_stack([
        xy[:, 0] - intrinsics[:, 0] - corrections[:, 0],
        xy[:, 1] - intrinsics[:, 1] - corrections[:, 1],
        -intrinsics[:, 2],
    ])
    directions = np.einsum("nji,nj->ni", rotations, local)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return np.array(translations, dtype=float), directions


def intersect_ray_pairs(origins1: np.ndarray, directions1: np.ndarray,
                        origins2: np.ndarray, directions2: np.ndarray,
                        min_angle: float = MIN_RAY_ANGLE) -> np.ndarray:
    """Midpoints of the common perpendiculars of n ray pairs; raises DegenerateRays"""
    d1 = directions1 / np.linalg.norm(directions1, axis=1, keepdims=True)
    d2 = directions2 / np.linalg.norm(directions2, axis=1, keepdims=True)
    sin_angle = np.linalg.norm(np.cross(d1, d2), axis=1)
    if np.any(sin_angle < math.sin(min_angle)):
        raise DegenerateRays(float(np.arcsin(np.clip(sin_angle.min(), 0.0, 1.0))))
    w0 = origins1 - origins2
    b = np.einsum("ni,ni->n", d1, d2)
    d = np.einsum("ni,ni->n", d1, w0)
    e = np.einsum("ni,ni->n", d2, w0)
    # normal equations of min |o1 + s d1 - o2 - t d2|^2 with |d1| = |d2| = 1
    A = np.empty((d1.shape[0], 2, 2))
    A[:, 0, 0] = 1.0
    A[:, 0, 1] = -b
    A[:, 1, 0] = b
    A[:, 1, 1] = -1.0
    rhs = np.column_stack([-d, -e])
    st = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
    p1 = origins1 + st[:, 0:1] * d1
    p2 = origins2 + st[:, 1:2] * d2
    return 0.5 * (p1 + p2)


# ---------------------------------------------------------------------------
# Scalar API
# ---------------------------------------------------------------------------

def _position(point: Union[ObjectPoint, ArrayLike]) -> np.ndarray:
    if isinstance(point, ObjectPoint):
        return point.position
    return np.asarray(point, dtype=float).reshape(3)


def project(point: Union[ObjectPoint, ArrayLike], pose: Pose, iop: Intrinsics,
            correction: ArrayLike = (0.0, 0.0)) -> ImagePoint:
    """
    Collinearity projection of one object point.

    Args:
        point: object point (mm, phantom frame)
        pose: exterior orientation of the exposure
        iop: interior orientation
        correction: image correction (dx, dy) in px

    Returns:
        ImagePoint in px

    Raises:
        PointBehindCamera: when W >= -epsilon
    """
    cam = pose.transform(_position(point))[None, :]
    xy = project_array(cam, iop.as_array()[None, :], np.asarray(correction, dtype=float).reshape(1, 2))[0]
    return ImagePoint(float(xy[0]), float(xy[1]))


def project_jacobian(point: Union[ObjectPoint, ArrayLike], pose: Pose, iop: Intrinsics) -> ProjectionJacobian:
    """Analytic partials of project w.r.t. point, translation, rotation tangent and IOP"""
    R = pose.matrix
    cam = pose.transform(_position(point))[None, :]
    d_camera, d_intrinsics = project_jacobian_array(cam, iop.as_array()[None, :])
    d_camera = d_camera[0]
    d_point = d_camera @ R
    return ProjectionJacobian(
        d_point=d_point,
        d_translation=-d_point,
        d_rotation=d_camera @ (-skew(cam[0])),
        d_intrinsics=d_intrinsics[0],
    )


def intersect_two_rays(obs1: ImagePoint, pose1: Pose, iop1: Intrinsics,
                       obs2: ImagePoint, pose2: Pose, iop2: Intrinsics,
                       correction1: ArrayLike = (0.0, 0.0),
                       correction2: ArrayLike = (0.0, 0.0)) -> np.ndarray:
    """
    Two-ray spatial intersection.

    Returns the midpoint of the common perpendicular between the two
    back-projected rays; for intersecting rays this is the intersection.

    Raises:
        DegenerateRays: when the rays are within 1e-6 rad of parallel
    """
    origins = []
    directions = []
    for obs, pose, iop, corr in ((obs1, pose1, iop1, correction1), (obs2, pose2, iop2, correction2)):
        o, d = back_project(obs.as_array()[None, :], pose.matrix[None, :, :], pose.center[None, :],
                            iop.as_array()[None, :], np.asarray(corr, dtype=float).reshape(1, 2))
        origins.append(o)
        directions.append(d)
    return intersect_ray_pairs(origins[0], directions[0], origins[1], directions[1])[0]


def intersect_rays(origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Least-squares point closest to n >= 2 rays"""
    d = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    projectors = np.eye(3)[None, :, :] - d[:, :, None] * d[:, None, :]
    A = projectors.sum(axis=0)
    b = np.einsum("nij,nj->i", projectors, origins)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as e:
        raise DegenerateRays(0.0) from e


def rigid_align(source: ArrayLike, target: ArrayLike) -> Alignment:
    """
    Orthogonal Procrustes without scale (Kabsch).

    Returns the pose mapping source onto target in the least-squares sense,
    together with the RMSE of the aligned point distances.

    Raises:
        DegenerateConfiguration: fewer than 3 points or a collinear source set
    """
    A = np.asarray(source, dtype=float)
    B = np.asarray(target, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise DegenerateConfiguration(f"Point sets must both be (n, 3), got {A.shape} and {B.shape}")
    if A.shape[0] < 3:
        raise DegenerateConfiguration(f"Need at least 3 correspondences, got {A.shape[0]}")

    centroid_A = A.mean(axis=0)
    centroid_B = B.mean(axis=0)
    A0 = A - centroid_A
    B0 = B - centroid_B
    spread = np.linalg.svd(A0, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-10 * spread[0]:
        raise DegenerateConfiguration("Source points are collinear")

    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = centroid_B - R @ centroid_A

    pose = Pose.from_rt(R, t)
    aligned = A @ R.T + t
    rmse = float(np.sqrt(np.mean(np.sum((aligned - B) ** 2, axis=1))))
    return Alignment(pose, rmse)
