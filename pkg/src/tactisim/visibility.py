"""Monte Carlo estimate of particle visibility through the particle layer.

A particle is hidden when its projected centre falls strictly inside the
projected circle of any particle closer to the camera. Visibility
probabilities are binned in 3D over the layer and looked up per sample point
to weight the synthetic optical flow.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .fields import ParticleLayerSpec
from .geometry import PinholeCamera, RigidTransform, particle_projected_radius, pinhole_project

__all__ = [
    "ParticleConfig",
    "VisibilityGrid",
    "particle_count",
    "sample_particles",
    "visible_flags",
    "bin_indices",
    "estimate_visibility_grid",
    "lookup",
    "weight",
    "save_grid",
    "load_grid",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParticleConfig:
    centers: np.ndarray  # (N, 3) gel frame, mm
    radii: np.ndarray  # (N,) mm

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(c) != len(r):
            raise ValueError("centers and radii differ in length")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def __len__(self) -> int:
        return len(self.radii)


def particle_count(layer: ParticleLayerSpec) -> int:
    """Particles needed to reach the layer's volume ratio at the mean radius."""
    r_mean = 0.5 * sum(layer.particle_radius_range)
    mean_volume = 4.0 / 3.0 * np.pi * r_mean**3
    return int(round(layer.particle_volume_ratio * layer.volume / mean_volume))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_particles(layer: ParticleLayerSpec, rng_seed=None) -> ParticleConfig:
    """Uniform i.i.d. centres in the layer box, uniform radii in range."""
    n = particle_count(layer)
    if n < 1:
        raise ValueError("particle volume ratio yields zero particles")
    rng = _rng(rng_seed)
    centers = rng.uniform(layer.lower, layer.upper, size=(n, 3))
    radii = rng.uniform(*layer.particle_radius_range, size=n)
    return ParticleConfig(centers, radii)


def visible_flags(config: ParticleConfig, cam: PinholeCamera, gel_to_pinhole: RigidTransform) -> np.ndarray:
    n = len(config)
    visible = np.ones(n, dtype=bool)
    if n < 2:
        return visible
    sP = gel_to_pinhole.apply(config.centers)
    pix = pinhole_project(cam, sP)
    rad = particle_projected_radius(cam, sP, config.radii)
    dist = np.linalg.norm(sP, axis=1)

    # candidate pairs only; margin guards against kd-tree rounding at r_max
    pairs = cKDTree(pix).query_pairs(float(rad.max()) * (1 + 1e-9), output_type="ndarray")
    if len(pairs) == 0:
        return visible
    a, b = pairs[:, 0], pairs[:, 1]
    gap = np.linalg.norm(pix[a] - pix[b], axis=1)
    visible[b[(dist[a] < dist[b]) & (gap < rad[a])]] = False
    visible[a[(dist[b] < dist[a]) & (gap < rad[b])]] = False
    return visible


def bin_indices(points, origin, extent, bin_dims) -> np.ndarray:
    """Flat x-fastest bin index of each point; half-open bins, clamped."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(bin_dims)
    size = np.asarray(extent, dtype=np.float64) / dims
    ijk = np.floor((p - np.asarray(origin)) / size).astype(np.int64)
    ijk = np.clip(ijk, 0, dims - 1)
    return ijk[:, 0] + dims[0] * (ijk[:, 1] + dims[1] * ijk[:, 2])


@dataclass(frozen=True, eq=False)
class VisibilityGrid:
    """Visibility probability per 3D bin, stored ``(b_z, b_y, b_x)``.

    Values are held at float32 precision so a grid written to disk and read
    back behaves identically to the in-memory one.
    """

    bin_dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    extent: tuple[float, float, float]
    probabilities: np.ndarray

    def __post_init__(self):
        dims = tuple(int(b) for b in self.bin_dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"degenerate bin dims {dims}")
        p = np.asarray(self.probabilities, dtype=np.float32).astype(np.float64)
        p = p.reshape(dims[2], dims[1], dims[0])
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "bin_dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "probabilities", p)

    @classmethod
    def uniform(cls, layer: ParticleLayerSpec, value: float = 1.0, bin_dims=(1, 1, 1)) -> "VisibilityGrid":
        dims = tuple(bin_dims)
        return cls(dims, layer.origin, layer.extent, np.full(dims[::-1], value))

    def lookup(self, p) -> np.ndarray:
        idx = bin_indices(p, self.origin, self.extent, self.bin_dims)
        out = self.probabilities.ravel()[idx]
        return out if np.ndim(p) > 1 else out[0]


def lookup(grid: VisibilityGrid, p):
    return grid.lookup(p)


def weight(grid: VisibilityGrid, s, ds):
    """Probability that both the undeformed and the deformed location are
    visible, treating the two events as independent."""
    s = np.asarray(s, dtype=np.float64)
    return grid.lookup(s) * grid.lookup(s + np.asarray(ds, dtype=np.float64))


def _one_config(args):
    layer, cam, T, dims, seed_seq, sampler = args
    config = sampler(layer, np.random.default_rng(seed_seq))
    flags = visible_flags(config, cam, T)
    idx = bin_indices(config.centers, layer.origin, layer.extent, dims)
    nbins = int(np.prod(dims))
    total = np.bincount(idx, minlength=nbins)
    vis = np.bincount(idx, weights=flags.astype(np.float64), minlength=nbins)
    return total, vis


def estimate_visibility_grid(
    layer: ParticleLayerSpec,
    cam: PinholeCamera,
    transform: RigidTransform,
    n_configs: int = 100,
    bin_dims=(15, 15, 9),
    rng_seed=0,
    sampler: Callable[[ParticleLayerSpec, np.random.Generator], ParticleConfig] = sample_particles,
    jobs: int = 1,
) -> VisibilityGrid:
    """Average, over random particle configurations, of the visible fraction
    of particles in each bin.

    Each configuration draws from its own stream spawned from ``rng_seed``, so
    the result does not depend on ``jobs``. Bins that never hold a particle
    get probability 1.
    """
    if n_configs < 1:
        raise ValueError("n_configs must be >= 1")
    dims = tuple(int(b) for b in bin_dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"degenerate bin dims {dims}")
    streams = np.random.SeedSequence(rng_seed).spawn(n_configs)
    tasks = [(layer, cam, transform, dims, ss, sampler) for ss in streams]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_config, tasks))
    else:
        results = [_one_config(t) for t in tasks]

    nbins = int(np.prod(dims))
    frac_sum = np.zeros(nbins)
    populated = np.zeros(nbins, dtype=np.int64)
    for total, vis in results:
        has = total > 0
        frac_sum[has] += vis[has] / total[has]
        populated += has
    prob = np.ones(nbins)
    seen = populated > 0
    prob[seen] = frac_sum[seen] / populated[seen]
    log.debug("visibility grid: %d/%d bins populated", int(seen.sum()), nbins)
    return VisibilityGrid(dims, layer.origin, layer.extent, prob.reshape(dims[::-1]))


def save_grid(grid: VisibilityGrid, path) -> None:
    """One JSON header line followed by little-endian float32, x fastest."""
    header = {"bin_dims": list(grid.bin_dims), "origin_mm": list(grid.origin), "extent_mm": list(grid.extent)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(grid.probabilities.astype("<f4").tobytes(order="C"))


def load_grid(path) -> VisibilityGrid:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing grid header")
    meta = json.loads(head.decode("utf-8"))
    dims = tuple(meta["bin_dims"])
    data = np.frombuffer(body, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return VisibilityGrid(dims, tuple(meta["origin_mm"]), tuple(meta["extent_mm"]), data.reshape(dims[::-1]))
