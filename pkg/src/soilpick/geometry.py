"""Rigid transforms and the pinhole camera model.

Camera frame convention: right-handed, +Z along the optical axis toward the
scene, +X along increasing pixel column (u), +Y along increasing pixel row (v).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R @ x + t`` mapping child-frame points into the parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), _as_vec3(t))

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
        return cls(rot_z(yaw) @ rot_y(pitch) @ rot_x(roll), _as_vec3(translation))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        if "rotation" in d:
            return cls(np.asarray(d["rotation"], dtype=float), d.get("translation", (0, 0, 0)))
        rpy = d.get("rpy", (0.0, 0.0, 0.0))
        return cls.from_rpy(*rpy, translation=d.get("translation", (0, 0, 0)))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # keeps long compositions inside the pose tolerance
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL / 10:
        r = _reorthonormalize(r)
    return Pose(r, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -(rt @ p.translation))


def transform_point(p: Pose, x) -> np.ndarray:
    return p.rotation @ _as_vec3(x) + p.translation


def transform_points(p: Pose, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return pts @ p.rotation.T + p.translation


def look_down_pose(position, yaw: float = 0.0) -> Pose:
    """Camera/sensor pose at ``position`` with its optical axis pointing along world -Z.

    At yaw 0 the image +u axis is world +X and +v is world -Y.
    """
    down = np.diag([1.0, -1.0, -1.0])
    return Pose(rot_z(yaw) @ down, _as_vec3(position))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        if "hfov" in d:
            return intrinsics_from_fov(d["hfov"], int(d["width"]), int(d["height"]))
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class PixelDepth:
    u: float
    v: float
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise GeometryError(f"depth must be positive, got {self.d}")


def intrinsics_from_fov(hfov: float, width: int, height: int) -> CameraIntrinsics:
    """Square-pixel intrinsics with the principal point at the image center."""
    if not (0.0 < hfov < math.pi):
        raise GeometryError(f"horizontal field of view must lie in (0, pi), got {hfov}")
    if width < 1 or height < 1:
        raise GeometryError("image size must be at least 1x1")
    fx = (width / 2.0) / math.tan(hfov / 2.0)
    return CameraIntrinsics(fx, fx, width / 2.0, height / 2.0, int(width), int(height))


def back_project(k: CameraIntrinsics, p: PixelDepth) -> np.ndarray:
    if not p.d > 0:
        raise GeometryError("depth must be positive")
    return np.array([(p.u - k.cx) * p.d / k.fx, (p.v - k.cy) * p.d / k.fy, p.d])


def project(k: CameraIntrinsics, point) -> PixelDepth:
    x, y, z = _as_vec3(point)
    if not z > 0:
        raise GeometryError("point is behind the camera")
    return PixelDepth(k.fx * x / z + k.cx, k.fy * y / z + k.cy, z)


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame ray directions (Z = 1) through every pixel, shape (H, W, 3).

    Pixel ``(u, v)`` with integer indices is sampled at exactly ``(u, v)``; the same
    convention back-projects region centroids.
    """
    u = np.arange(k.width, dtype=float)
    v = np.arange(k.height, dtype=float)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
