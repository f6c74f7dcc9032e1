"""
Pinhole camera geometry.

Conventions used throughout the app:

* rotation from Euler angles is ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``;
* ``world_to_camera(p) = R p - t`` and ``camera_to_world(p) = R^T p + R^T t``,
  so the camera centre in world coordinates is ``R^T t`` and its looking-at
  direction is ``R^T e_z``, i.e. the third row of R;
* image-plane coordinates are normalised so the longer image side spans
  [-1, 1], u grows with the column index and v with the row index.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .exceptions import GeometryError

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    c: float = 1.0
    u0: float = 0.0
    v0: float = 0.0

    def __post_init__(self) -> None:
        if not self.c > 0.0:
            raise GeometryError(f"focal length must be positive, got {self.c}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.c, 0.0, self.u0], [0.0, self.c, self.v0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EulerAngles:
    yaw: float
    pitch: float
    roll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], dtype=np.float64)


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "Point3":
        x, y, z = (float(v) for v in np.asarray(values).reshape(3))
        return cls(x, y, z)


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not is_rotation(R):
            raise GeometryError("R is not a proper rotation matrix")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return self.R.T @ self.t

    @property
    def looking_at(self) -> np.ndarray:
        """Unit optical axis (+z of the camera) in world coordinates."""
        return self.R[2].copy()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CameraExtrinsics):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))


@dataclass(frozen=True, eq=False)
class PatchGrid:
    rows: int
    cols: int
    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    intrinsics: CameraIntrinsics = CameraIntrinsics()

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols


def is_rotation(R: np.ndarray, tolerance: float = ORTHONORMAL_TOLERANCE) -> bool:
    R = np.asarray(R, dtype=np.float64)
    orthogonality = np.linalg.norm(R.T @ R - np.eye(3))
    return bool(orthogonality < tolerance and abs(np.linalg.det(R) - 1.0) < tolerance)


def rotation_entries(yaw: np.ndarray, pitch: np.ndarray, roll: np.ndarray) -> np.ndarray:
    """Stacked ``Rz(yaw) Ry(pitch) Rx(roll)`` for broadcastable angle arrays, shape [..., 3, 3]."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    entries = [
        cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
        sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
        -sp, cp * sr, cp * cr,
    ]
    stacked = np.stack(np.broadcast_arrays(*entries), axis=-1)
    return stacked.reshape(stacked.shape[:-1] + (3, 3))


def euler_to_rotation(angles: Union[EulerAngles, np.ndarray]) -> np.ndarray:
    values = angles.as_array() if isinstance(angles, EulerAngles) else np.asarray(angles, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise GeometryError("Euler angles must be finite")
    return rotation_entries(values[..., 0], values[..., 1], values[..., 2])


def uvd_to_camera(u: float, v: float, d: float, k: CameraIntrinsics) -> Point3:
    """Lift an image-plane point with depth to camera coordinates."""
    z = float(d)
    return Point3((u - k.u0) * z / k.c, (v - k.v0) * z / k.c, z)


def camera_to_world(p: Union[Point3, np.ndarray], ext: CameraExtrinsics) -> Union[Point3, np.ndarray]:
    """``R^T p + R^T t``; arrays of shape [..., 3] are mapped row-wise."""
    if isinstance(p, Point3):
        return Point3.from_array(camera_to_world(p.as_array(), ext))
    return (np.asarray(p) + ext.t) @ ext.R


def world_to_camera(p: Union[Point3, np.ndarray], ext: CameraExtrinsics) -> Union[Point3, np.ndarray]:
    """``R p - t``, the exact inverse of :func:`camera_to_world`."""
    if isinstance(p, Point3):
        return Point3.from_array(world_to_camera(p.as_array(), ext))
    return np.asarray(p) @ ext.R.T - ext.t


def project(p_cam: Point3, k: CameraIntrinsics) -> Tuple[float, float]:
    if not p_cam.z > 0.0:
        raise GeometryError(f"point is behind camera (z={p_cam.z})")
    return k.c * p_cam.x / p_cam.z + k.u0, k.c * p_cam.y / p_cam.z + k.v0


def project_points(points: np.ndarray, k: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project` for points with z > 0, shape [n, 3]."""
    z = points[:, 2]
    if np.any(z <= 0.0):
        raise GeometryError("points are behind camera")
    return k.c * points[:, 0] / z + k.u0, k.c * points[:, 1] / z + k.v0


def grid_centres(count: int, longer: int) -> np.ndarray:
    return (2.0 * np.arange(count) + 1.0 - count) / longer


def make_patch_grid(rows: int, cols: int, intrinsics: CameraIntrinsics = CameraIntrinsics()) -> PatchGrid:
    """Token-centre coordinates in row-major order, longer side spanning [-1, 1]."""
    if rows < 1 or cols < 1:
        raise GeometryError(f"patch grid extents must be positive, got {rows}x{cols}")
    longer = max(rows, cols)
    v, u = np.meshgrid(grid_centres(rows, longer), grid_centres(cols, longer), indexing="ij")
    return PatchGrid(rows=rows, cols=cols, u=u.reshape(-1), v=v.reshape(-1), intrinsics=intrinsics)


def look_at(
    center: np.ndarray, target: Optional[np.ndarray] = None, up: Optional[np.ndarray] = None
) -> CameraExtrinsics:
    """Extrinsics of a camera at ``center`` whose optical axis points at ``target`` (default origin)."""
    center = np.asarray(center, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    forward = target - center
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise GeometryError("camera centre coincides with its target")
    forward /= norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise GeometryError("looking direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraExtrinsics(R=R, t=R @ center)
