"""Coordinate frames, rigid transforms and the reference pinhole camera.

Frame conventions
-----------------
Gel frame (G)
    Origin at a corner of the particle layer, ``z`` pointing toward the
    sensing surface. The particle layer occupies ``[0, X] x [0, Y] x [0, Z]``
    with ``z = 0`` being the face closest to the camera.
Pinhole frame (P)
    Reference ideal camera. ``z`` points away from the gel, so every scene
    point has ``z < 0`` and the focal length is negative. A pixel is
    ``u = f x / z + u_c``, ``v = f y / z + v_c``.

Pixel coordinates are continuous with ``(0, 0)`` at the corner of the first
pixel, so an image of width ``W`` spans ``[0, W]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "GeometryError",
    "ProjectionError",
    "RigidTransform",
    "PinholeCamera",
    "rotation_about_axis",
    "transform_point",
    "transform_vector",
    "default_focal",
    "default_gel_to_pinhole",
    "pinhole_project",
    "pinhole_project_pair",
    "invert_pinhole",
    "particle_projected_radius",
    "load_camera_json",
    "save_camera_json",
]

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for geometrically impossible configurations."""


class ProjectionError(GeometryError):
    """Raised when a point sits on the camera plane (zero depth)."""


def _as_points(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation, ``x -> R x + t`` (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("transform contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation is a reflection (det != +1)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        return _as_points(points) @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        """Rotate free vectors of shape ``(..., 3)``; translation is ignored."""
        return _as_points(vectors) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def with_translation(self, translation) -> "RigidTransform":
        return RigidTransform(self.rotation, translation)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation_mm": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RigidTransform":
        return cls(
            np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["translation_mm"], dtype=np.float64),
        )


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a right-handed rotation by ``angle`` rad."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    # exact quarter/half turns: drop sin(pi) ~ 1e-16 residue
    R[np.abs(R) < 1e-15] = 0.0
    return R


def transform_point(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def transform_vector(T: RigidTransform, v) -> np.ndarray:
    return T.apply_vector(v)


@dataclass(frozen=True)
class PinholeCamera:
    """Ideal pinhole camera with square pixels.

    ``focal`` is negative under the frame convention of this package.
    """

    focal: float = -440.0
    center: tuple[float, float] = (220.0, 220.0)
    image_size: tuple[int, int] = (440, 440)

    def __post_init__(self):
        f = float(self.focal)
        if f == 0.0 or not np.isfinite(f):
            raise GeometryError("focal length must be finite and non-zero")
        c = (float(self.center[0]), float(self.center[1]))
        size = (int(self.image_size[0]), int(self.image_size[1]))
        if size[0] <= 0 or size[1] <= 0:
            raise GeometryError("image size must be positive")
        if not (0.0 <= c[0] <= size[0] and 0.0 <= c[1] <= size[1]):
            raise GeometryError(f"center {c} outside image {size}")
        object.__setattr__(self, "focal", f)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "image_size", size)

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "focal_px": self.focal,
            "center_px": list(self.center),
            "image_size_px": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PinholeCamera":
        return cls(d["focal_px"], tuple(d["center_px"]), tuple(d["image_size_px"]))


def default_focal(t_z: float, image_px: float = 440, gel_side: float = 30) -> float:
    """Focal length that makes a ``gel_side`` wide layer at depth ``t_z`` fill
    ``image_px`` pixels. Negative whenever ``t_z`` is."""
    if t_z == 0:
        raise GeometryError("t_z must be non-zero")
    return image_px / gel_side * t_z


def default_gel_to_pinhole(
    t_z: float = -30.0, extent: tuple[float, float] = (30.0, 30.0)
) -> RigidTransform:
    """Camera below the gel, looking up at the layer centre.

    A half turn about ``x`` flips ``z`` so the gel lies at negative pinhole
    depth; the layer's bottom face lands exactly on ``z = t_z``.
    """
    R = np.diag([1.0, -1.0, -1.0])
    cx, cy = extent[0] / 2, extent[1] / 2
    return RigidTransform(R, np.array([-cx, cy, t_z]))


def _check_depth(z: np.ndarray, what: str = "point") -> None:
    if np.any(z == 0):
        raise ProjectionError(f"{what} at zero depth cannot be projected")


def pinhole_project(cam: PinholeCamera, s) -> np.ndarray:
    """Project pinhole-frame points ``(..., 3)`` to pixels ``(..., 2)``."""
    s = _as_points(s)
    z = s[..., 2]
    _check_depth(z)
    u = cam.focal * s[..., 0] / z + cam.center[0]
    v = cam.focal * s[..., 1] / z + cam.center[1]
    return np.stack([u, v], axis=-1)


def pinhole_project_pair(cam: PinholeCamera, s, ds) -> np.ndarray:
    """Pixel displacement of a point moving from ``s`` to ``s + ds``.

    The undeformed and deformed positions are each divided by their own depth.
    """
    s = _as_points(s)
    ds = _as_points(ds)
    _check_depth(s[..., 2])
    _check_depth(s[..., 2] + ds[..., 2], "deformed point")
    return pinhole_project(cam, s + ds) - pinhole_project(cam, s)


def invert_pinhole(cam: PinholeCamera, p, z_plane) -> np.ndarray:
    """Back-project pixels ``(..., 2)`` to depth ``z_plane``, a scalar plane
    or one depth per pixel."""
    zp = np.asarray(z_plane, dtype=np.float64)
    if np.any(zp == 0):
        raise ProjectionError("z_plane must be non-zero")
    p = np.asarray(p, dtype=np.float64)
    x = zp * (p[..., 0] - cam.center[0]) / cam.focal
    y = zp * (p[..., 1] - cam.center[1]) / cam.focal
    z = np.broadcast_to(zp, x.shape).astype(np.float64)
    return np.stack([x, y, z], axis=-1)


def particle_projected_radius(cam: PinholeCamera, s_p, R) -> np.ndarray | float:
    """Image radius (px) of a sphere of radius ``R`` centred at ``s_p``.

    Measured from the projected centre to the projection of the outer tangent
    ray, which lies in the plane spanned by the optical axis and the centre.
    Vectorised over ``s_p`` of shape ``(..., 3)`` and broadcastable ``R``.
    """
    s = _as_points(s_p)
    R = np.asarray(R, dtype=np.float64)
    z = s[..., 2]
    _check_depth(z, "particle")
    # mirror to the negative-depth half so one formula covers both signs
    zn = -np.abs(z)
    xt = np.hypot(s[..., 0], s[..., 1])
    dist = np.hypot(xt, zn)
    ratio = R / dist
    if np.any(ratio >= 1):
        raise GeometryError("particle intersects the camera centre")
    alpha = np.arctan2(-zn, xt)
    beta = np.arcsin(ratio)
    gamma = alpha - beta
    xr = xt + R * np.sin(gamma)
    zr = zn + R * np.cos(gamma)
    if np.any(zr >= 0):
        raise GeometryError("tangent point behind the camera plane")
    r = np.abs(cam.focal * (xr / zr - xt / zn))
    return float(r) if r.ndim == 0 else r


def load_camera_json(path) -> tuple[PinholeCamera, RigidTransform]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return PinholeCamera.from_dict(d), RigidTransform.from_dict(d)


def save_camera_json(cam: PinholeCamera, T: RigidTransform, path) -> None:
    d = {**T.to_dict(), **cam.to_dict()}
    Path(path).write_text(json.dumps(d, indent=2), encoding="utf-8")
