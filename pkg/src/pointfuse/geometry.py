"""Rigid/similarity transforms, pinhole cameras and pointmap containers.

Conventions
-----------
* Camera frame: x right, y down, z forward (optical axis).
* Poses are camera-to-world. The world frame is the frame of the first camera,
  so view 0 of a ground-truth sample has the identity pose.
* Pixel ``(row i, col j)`` has its center at ``(u, v) = (j + 0.5, i + 0.5)``.
* Everything here runs in float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, NonPositiveDepth

DEPTH_EPS = 1e-12
CONF_CLAMP = 20.0
ROTATION_TOL = 1e-6


def _as_rotation(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {r.shape}")
    if not is_rotation(r, ROTATION_TOL):
        raise GeometryError("matrix is not a proper rotation")
    return r


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=np.float64)
    return bool(
        np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    # uniform via normalized quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map points of shape (..., 3)."""
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    @classmethod
    def from_rigid(cls, t: RigidTransform) -> "SimilarityTransform":
        return cls(1.0, t.rotation, t.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("focal", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.focal > 0:
            raise GeometryError(f"focal must be positive, got {self.focal}")

    @classmethod
    def centered(cls, focal: float, h: int, w: int) -> "CameraIntrinsics":
        return cls(float(focal), w / 2.0, h / 2.0)

    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0, self.cx], [0, self.focal, self.cy], [0, 0, 1.0]])

    def inside(self, h: int, w: int) -> bool:
        return 0 <= self.cx <= w and 0 <= self.cy <= h


@dataclass(frozen=True)
class CameraModel:
    intrinsics: CameraIntrinsics
    pose: RigidTransform  # camera-to-world


def project(p, k: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = k.focal * p[..., 0] / z + k.cx
    v = k.focal * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def unproject(u, v, depth, k: CameraIntrinsics) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= DEPTH_EPS):
        raise NonPositiveDepth("depth must be positive")
    x = (u - k.cx) / k.focal * depth
    y = (v - k.cy) / k.focal * depth
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates ``(u, v)``, each of shape (h, w)."""
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return u, v


def rotation_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    r = np.asarray(a, dtype=np.float64).T @ np.asarray(b, dtype=np.float64)
    # atan2 keeps full precision near 0 and 180 degrees, unlike arccos
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(skew), np.trace(r) - 1.0)))


def translation_angle_deg(a, b, eps: float = 1e-8) -> float:
    """Angle between two direction vectors, in degrees.

    Both (near) zero gives 0; exactly one (near) zero gives 180.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps and nb < eps:
        return 0.0
    if na < eps or nb < eps:
        return 180.0
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


class Frame(enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class Pointmap:
    points: np.ndarray  # (H, W, 3)
    frame: Frame
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        pts = np.asarray(self.points)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if pts.ndim != 3 or pts.shape[2] != 3 or mask.shape != pts.shape[:2]:
            raise GeometryError(f"pointmap shape mismatch: {pts.shape} vs mask {mask.shape}")
        if not np.all(np.isfinite(pts[mask])):
            raise GeometryError("non-finite valid point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid_mask]


@dataclass(frozen=True)
class ConfidenceMap:
    raw: np.ndarray  # (H, W), clamped to [-20, 20]

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if not np.all(np.isfinite(raw)):
            raise GeometryError("non-finite confidence")
        object.__setattr__(self, "raw", np.clip(raw, -CONF_CLAMP, CONF_CLAMP))

    def positive(self) -> np.ndarray:
        return 1.0 + np.exp(self.raw)


def transform_pointmap(pm: Pointmap, t: SimilarityTransform | RigidTransform) -> Pointmap:
    if isinstance(t, RigidTransform):
        t = SimilarityTransform.from_rigid(t)
    out = np.array(pm.points, dtype=np.float64, copy=True)
    out[pm.valid_mask] = t.apply(out[pm.valid_mask])
    return Pointmap(out, pm.frame, pm.valid_mask.copy())


def check_images(images: np.ndarray) -> np.ndarray:
    """Validate an N x H x W x 3 image stack with values in [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 3 or images.shape[0] < 1:
        raise GeometryError(f"expected N x H x W x 3 images, got {images.shape}")
    if np.any(images < 0) or np.any(images > 1):
        raise GeometryError("image values must lie in [0, 1]")
    return images
