"""Synthetic optical-flow features and binned force labels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import FileFormatError, read_csv_table, read_json, sidecar_path, write_csv_table, write_json
from .fields import GridField
from .geometry import PinholeCamera, RigidTransform, pinhole_project, pinhole_project_pair
from .visibility import VisibilityGrid

__all__ = [
    "FeatureImage",
    "ForceDistribution",
    "NodalForces",
    "bin_displacements",
    "flow_samples",
    "synth_optical_flow",
    "bin_forces",
    "total_force",
    "save_feature_image",
    "load_feature_image",
    "save_force_distribution",
    "load_force_distribution",
    "load_nodal_forces",
    "save_nodal_forces",
    "NODAL_HEADER",
]

NODAL_HEADER = ("x", "y", "z", "fx", "fy", "fz")
EMPTY_WEIGHT = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """Mean pixel displacement per image region, shape ``(2, m, m)``.

    Channel 0 is ``du``, channel 1 ``dv``; rows follow ``v``, columns ``u``.
    """

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[0] != 2 or d.shape[1] != d.shape[2]:
            raise ValueError(f"feature image must be 2 x m x m, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def m(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class ForceDistribution:
    """Force per surface bin (N), shape ``(3, n, n)``; rows follow ``y``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[0] != 3 or d.shape[1] != d.shape[2]:
            raise ValueError(f"force distribution must be 3 x n x n, got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def __add__(self, other: "ForceDistribution") -> "ForceDistribution":
        return ForceDistribution(self.data + other.data)


@dataclass(frozen=True, eq=False)
class NodalForces:
    positions: np.ndarray  # (N, 3) gel frame, mm
    forces: np.ndarray  # (N, 3) N

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        if p.shape != f.shape:
            raise ValueError("positions and forces differ in length")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "forces", f)


def _region_index(coord: np.ndarray, lo: float, size: float, count: int) -> np.ndarray:
    idx = np.floor((coord - lo) * count / size).astype(np.int64)
    # points exactly on the far border belong to the last region
    return np.where(coord == lo + size, count - 1, idx)


def bin_displacements(pixels, dp, weights, m: int, image_size) -> FeatureImage:
    """Weighted mean of pixel displacements per region of an ``m x m`` split.

    Samples are assigned by their undeformed pixel; those outside the image
    are dropped. Regions whose total weight is below 1e-12 hold zeros.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(dp, dtype=np.float64).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    W, H = image_size
    col = _region_index(p[:, 0], 0.0, W, m)
    row = _region_index(p[:, 1], 0.0, H, m)
    keep = (col >= 0) & (col < m) & (row >= 0) & (row < m)
    flat = (row * m + col)[keep]
    w, d = w[keep], d[keep]

    wsum = np.bincount(flat, weights=w, minlength=m * m)
    su = np.bincount(flat, weights=w * d[:, 0], minlength=m * m)
    sv = np.bincount(flat, weights=w * d[:, 1], minlength=m * m)
    out = np.zeros((2, m * m))
    ok = wsum >= EMPTY_WEIGHT
    out[0, ok] = su[ok] / wsum[ok]
    out[1, ok] = sv[ok] / wsum[ok]
    return FeatureImage(out.reshape(2, m, m))


def flow_samples(points, displacements, cam: PinholeCamera, gel_to_pinhole: RigidTransform, vis: VisibilityGrid):
    """Per-point undeformed pixel, pixel displacement and occlusion weight."""
    s = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ds = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    sP = gel_to_pinhole.apply(s)
    dsP = gel_to_pinhole.apply_vector(ds)
    pix = pinhole_project(cam, sP)
    dpix = pinhole_project_pair(cam, sP, dsP)
    w = vis.lookup(s) * vis.lookup(s + ds)
    return pix, dpix, w


def synth_optical_flow(
    field: GridField,
    cam: PinholeCamera,
    gel_to_pinhole: RigidTransform,
    vis: VisibilityGrid,
    m: int = 40,
) -> FeatureImage:
    pix, dpix, w = flow_samples(field.points, field.displacements, cam, gel_to_pinhole, vis)
    return bin_displacements(pix, dpix, w, m, cam.image_size)


def bin_forces(nf: NodalForces, n: int = 20, surface_extent=((0.0, 30.0), (0.0, 30.0))) -> ForceDistribution:
    """Sum nodal forces into an ``n x n`` grid over the sensing surface."""
    if n < 1:
        raise ValueError("n must be >= 1")
    (x0, x1), (y0, y1) = surface_extent
    pos = nf.positions
    tol = 1e-9
    outside = (pos[:, 0] < x0 - tol) | (pos[:, 0] > x1 + tol) | (pos[:, 1] < y0 - tol) | (pos[:, 1] > y1 + tol)
    if outside.any():
        i = int(np.argmax(outside))
        raise ValueError(f"nodal force {i} at {pos[i, :2].tolist()} lies outside the surface extent")
    col = np.clip(_region_index(pos[:, 0], x0, x1 - x0, n), 0, n - 1)
    row = np.clip(_region_index(pos[:, 1], y0, y1 - y0, n), 0, n - 1)
    flat = row * n + col
    out = np.stack([np.bincount(flat, weights=nf.forces[:, c], minlength=n * n) for c in range(3)])
    return ForceDistribution(out.reshape(3, n, n))


def total_force(F: ForceDistribution) -> np.ndarray:
    return np.array([math.fsum(F.data[c].ravel()) for c in range(3)])


def _save_channels(data: np.ndarray, path, meta: dict) -> None:
    Path(path).write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes(order="C"))
    write_json(sidecar_path(path), meta)


def _load_channels(path, size_key: str, nch: int) -> np.ndarray:
    meta = read_json(sidecar_path(path))
    side = int(meta[size_key])
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    expected = nch * side * side
    if raw.size != expected:
        raise FileFormatError(f"{path}: shape error, expected {expected} floats, found {raw.size}")
    return raw.astype(np.float64).reshape(nch, side, side)


def save_feature_image(img: FeatureImage, path) -> None:
    _save_channels(img.data, path, {"m": img.m, "channels": ["du", "dv"], "units": "px"})


def load_feature_image(path) -> FeatureImage:
    return FeatureImage(_load_channels(path, "m", 2))


def save_force_distribution(F: ForceDistribution, path) -> None:
    _save_channels(F.data, path, {"n": F.n, "channels": ["fx", "fy", "fz"], "units": "N"})


def load_force_distribution(path) -> ForceDistribution:
    return ForceDistribution(_load_channels(path, "n", 3))


def load_nodal_forces(path) -> NodalForces:
    data = read_csv_table(path, NODAL_HEADER, what="nodes")
    return NodalForces(data[:, :3], data[:, 3:])


def save_nodal_forces(nf: NodalForces, path) -> None:
    write_csv_table(path, NODAL_HEADER, np.hstack([nf.positions, nf.forces]))
