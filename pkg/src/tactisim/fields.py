"""Displacement fields of the particle layer.

Scattered fields come from FEM exports (or the analytic half-space oracle
below) and are interpolated with inverse distance weighting onto a regular
cell-centred grid of undeformed locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from ._io import FileFormatError, read_csv_table, read_json, sidecar_path, write_csv_table, write_json

__all__ = [
    "ParticleLayerSpec",
    "ScatteredField",
    "GridField",
    "Contact",
    "Material",
    "sample_grid",
    "grid_dims",
    "idw_interpolate",
    "halfspace_field",
    "hertz_force",
    "hertz_contact_radius",
    "hertz_nodal_forces",
    "fem_like_nodes",
    "load_field",
    "save_field",
    "FIELD_HEADER",
]

FIELD_HEADER = ("x", "y", "z", "dx", "dy", "dz")
EXACT_HIT_MM = 1e-9


@dataclass(frozen=True)
class ParticleLayerSpec:
    """Box of gel that carries the tracked particles (mm).

    Defaults are the sensor's 30 x 30 x 4.5 mm layer with particle diameters
    of 150 to 180 um. The volume ratio is not a measured value.
    """

    extent: tuple[float, float, float] = (30.0, 30.0, 4.5)
    particle_radius_range: tuple[float, float] = (0.075, 0.09)
    particle_volume_ratio: float = 0.002
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        ext = tuple(float(e) for e in self.extent)
        rr = tuple(float(r) for r in self.particle_radius_range)
        org = tuple(float(o) for o in self.origin)
        if len(ext) != 3 or min(ext) <= 0:
            raise ValueError(f"layer extents must be positive, got {ext}")
        if not 0 < rr[0] <= rr[1]:
            raise ValueError(f"invalid particle radius range {rr}")
        if not 0 < self.particle_volume_ratio < 1:
            raise ValueError("particle volume ratio must lie in (0, 1)")
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "particle_radius_range", rr)
        object.__setattr__(self, "origin", org)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.extent)

    def to_dict(self) -> dict:
        return {
            "extent_mm": list(self.extent),
            "origin_mm": list(self.origin),
            "particle_radius_range_mm": list(self.particle_radius_range),
            "particle_volume_ratio": self.particle_volume_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParticleLayerSpec":
        return cls(
            extent=tuple(d["extent_mm"]),
            particle_radius_range=tuple(d["particle_radius_range_mm"]),
            particle_volume_ratio=d["particle_volume_ratio"],
            origin=tuple(d.get("origin_mm", (0.0, 0.0, 0.0))),
        )


@dataclass(frozen=True, eq=False)
class ScatteredField:
    """Displacements known at arbitrary node positions (gel frame, mm)."""

    positions: np.ndarray
    displacements: np.ndarray
    bbox_min: np.ndarray | None = None
    bbox_max: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        disp = np.array(self.displacements, dtype=np.float64).reshape(-1, 3)
        if len(pos) == 0:
            raise ValueError("field has no nodes")
        if pos.shape != disp.shape:
            raise ValueError("positions and displacements differ in length")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(disp))):
            raise ValueError("field contains non-finite values")
        if self.bbox_min is not None and self.bbox_max is not None:
            lo = np.asarray(self.bbox_min, dtype=np.float64)
            hi = np.asarray(self.bbox_max, dtype=np.float64)
            outside = np.any((pos < lo - 1e-9) | (pos > hi + 1e-9), axis=1)
            if outside.any():
                raise ValueError(f"node {int(np.argmax(outside))} lies outside the bounding box")
            object.__setattr__(self, "bbox_min", lo)
            object.__setattr__(self, "bbox_max", hi)
        pos.setflags(write=False)
        disp.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "displacements", disp)

    def __len__(self) -> int:
        return len(self.positions)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.positions)


@dataclass(frozen=True, eq=False)
class GridField:
    """Displacements on a regular lattice, x-fastest ordering."""

    grid_dims: tuple[int, int, int]
    spacing: float
    origin: tuple[float, float, float]
    displacements: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.grid_dims)
        disp = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 3)
        if int(np.prod(dims)) != len(disp):
            raise ValueError(f"grid dims {dims} do not match {len(disp)} displacement entries")
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "displacements", disp)

    @property
    def points(self) -> np.ndarray:
        return _lattice(self.grid_dims, self.spacing, self.origin)

    @classmethod
    def zeros(cls, layer: ParticleLayerSpec, spacing: float) -> "GridField":
        dims, origin = _grid_layout(layer, spacing)
        return cls(dims, spacing, origin, np.zeros((int(np.prod(dims)), 3)))


def _grid_layout(layer: ParticleLayerSpec, spacing: float):
    if not spacing > 0:
        raise ValueError("grid spacing must be positive")
    if spacing > min(layer.extent):
        raise ValueError("grid spacing exceeds the smallest layer extent")
    ext = np.asarray(layer.extent)
    dims = np.maximum(np.floor(ext / spacing + 1e-9).astype(int), 1)
    # centre the lattice; with exact division these are the cell centres
    first = layer.lower + (ext - (dims - 1) * spacing) / 2
    return tuple(int(d) for d in dims), tuple(float(o) for o in first)


def _lattice(dims, spacing, origin) -> np.ndarray:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    idx = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(np.float64)
    return idx * spacing + np.asarray(origin)


def grid_dims(layer: ParticleLayerSpec, spacing: float) -> tuple[int, int, int]:
    return _grid_layout(layer, spacing)[0]


def sample_grid(layer: ParticleLayerSpec, spacing: float) -> np.ndarray:
    """Cell-centred undeformed locations filling the layer, shape ``(N, 3)``."""
    dims, origin = _grid_layout(layer, spacing)
    return _lattice(dims, spacing, origin)


def idw_interpolate(field: ScatteredField, queries, power: float = 2.0, k_neighbors: int = 8) -> np.ndarray:
    """Shepard interpolation over the ``k_neighbors`` nearest nodes.

    A query closer than 1e-9 mm to a node returns that node's displacement.
    """
    if len(field) == 0:
        raise ValueError("empty field")
    if not power > 0:
        raise ValueError("power must be positive")
    if not 1 <= k_neighbors <= len(field):
        raise ValueError(f"k_neighbors must lie in [1, {len(field)}]")
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(q) == 0:
        return np.zeros((0, 3))
    dist, idx = field.tree.query(q, k=k_neighbors)
    dist = dist.reshape(len(q), k_neighbors)
    idx = idx.reshape(len(q), k_neighbors)

    hit = dist[:, 0] < EXACT_HIT_MM
    safe = np.where(hit[:, None], 1.0, dist)
    w = safe ** (-power)
    vals = field.displacements[idx]  # (nq, k, 3)
    out = np.einsum("qk,qkc->qc", w, vals) / w.sum(axis=1, keepdims=True)
    out[hit] = field.displacements[idx[hit, 0]]
    return out


@dataclass(frozen=True)
class Contact:
    """Normal point load on the sensing surface; ``radius`` is the contact
    patch radius used when distributing the load over surface nodes."""

    center: tuple[float, float]
    normal_force: float
    radius: float = 0.0


@dataclass(frozen=True)
class Material:
    shear_modulus: float = 0.05  # MPa == N/mm^2
    poisson: float = 0.45

    def __post_init__(self):
        if not self.shear_modulus > 0:
            raise ValueError("shear modulus must be positive")
        if not 0 < self.poisson < 0.5:
            raise ValueError("poisson ratio must lie in (0, 0.5)")

    @property
    def youngs_modulus(self) -> float:
        return 2 * self.shear_modulus * (1 + self.poisson)


def halfspace_field(contacts, material: Material, queries, surface_z: float) -> np.ndarray:
    """Boussinesq displacements (mm) below normal point loads.

    Test/demo source only: linear elastic half-space bounded by the plane
    ``z = surface_z``, loads pressing toward ``-z``. Contributions of several
    contacts are summed.
    """
    if isinstance(contacts, Contact):
        contacts = [contacts]
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    depth = surface_z - q[:, 2]
    if np.any(depth < 0):
        raise ValueError("queries must lie below the surface")
    G, nu = material.shear_modulus, material.poisson
    out = np.zeros_like(q)
    for c in contacts:
        if c.normal_force == 0:
            continue
        rx = q[:, 0] - c.center[0]
        ry = q[:, 1] - c.center[1]
        R = np.sqrt(rx * rx + ry * ry + depth * depth)
        if np.any(R < 1e-12):
            raise ValueError("query coincides with the load point")
        scale = c.normal_force / (4 * np.pi * G)
        radial = scale * (depth / R**3 - (1 - 2 * nu) / (R * (R + depth)))
        down = scale * (depth * depth / R**3 + 2 * (1 - nu) / R)
        out[:, 0] += radial * rx
        out[:, 1] += radial * ry
        out[:, 2] -= down
    return out


def hertz_force(depth: float, indenter_radius: float, material: Material) -> float:
    """Normal force (N) of a rigid sphere pressed ``depth`` mm into the gel."""
    if depth <= 0:
        return 0.0
    e_star = material.youngs_modulus / (1 - material.poisson**2)
    return 4.0 / 3.0 * e_star * np.sqrt(indenter_radius) * depth**1.5


def hertz_contact_radius(depth: float, indenter_radius: float) -> float:
    return float(np.sqrt(indenter_radius * max(depth, 0.0)))


def hertz_nodal_forces(contact: Contact, surface_nodes) -> np.ndarray:
    """Distribute a contact's normal force over surface nodes with a
    Hertzian pressure profile. Forces point toward ``-z``; the sum is exactly
    the contact force up to rounding."""
    nodes = np.asarray(surface_nodes, dtype=np.float64).reshape(-1, 3)
    forces = np.zeros_like(nodes)
    if contact.normal_force == 0 or len(nodes) == 0:
        return forces
    rho2 = (nodes[:, 0] - contact.center[0]) ** 2 + (nodes[:, 1] - contact.center[1]) ** 2
    a2 = contact.radius**2
    w = np.sqrt(np.clip(1 - rho2 / a2, 0, None)) if a2 > 0 else np.zeros(len(nodes))
    if w.sum() == 0:
        w[np.argmin(rho2)] = 1.0
    forces[:, 2] = -contact.normal_force * w / w.sum()
    return forces


def fem_like_nodes(layer: ParticleLayerSpec, spacing: float, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Node cloud standing in for an FEM mesh: a lattice spanning the layer
    boundary-to-boundary with interior nodes jittered by ``jitter * spacing``."""
    ext = np.asarray(layer.extent)
    dims = np.maximum(np.ceil(ext / spacing - 1e-9).astype(int), 1) + 1
    axes = [np.linspace(layer.lower[i], layer.upper[i], dims[i]) for i in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    nodes = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    if jitter > 0:
        step = ext / (dims - 1)
        noise = rng.uniform(-jitter, jitter, size=nodes.shape) * step
        interior = np.all((nodes > layer.lower + 1e-9) & (nodes < layer.upper - 1e-9), axis=1)
        nodes[interior] += noise[interior]
    return nodes


def load_field(path) -> ScatteredField:
    """Read a ``x,y,z,dx,dy,dz`` CSV (mm, gel frame) plus optional sidecar."""
    data = read_csv_table(path, FIELD_HEADER, what="nodes")
    lo = hi = None
    side = sidecar_path(path)
    if side.exists():
        meta = read_json(side)
        lo = np.asarray(meta["origin_mm"], dtype=np.float64)
        hi = lo + np.asarray(meta["extent_mm"], dtype=np.float64)
    try:
        return ScatteredField(data[:, :3], data[:, 3:], lo, hi)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from None


def save_field(field: ScatteredField, path) -> None:
    write_csv_table(path, FIELD_HEADER, np.hstack([field.positions, field.displacements]))
    if field.bbox_min is not None and field.bbox_max is not None:
        write_json(
            sidecar_path(path),
            {
                "origin_mm": [float(v) for v in field.bbox_min],
                "extent_mm": [float(v) for v in field.bbox_max - field.bbox_min],
            },
        )
