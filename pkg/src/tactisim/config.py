"""Pipeline configuration with every default spelled out.

The JSON form has one section per module; a partial JSON file overrides
only the keys it names. ``PipelineConfig().to_dict()`` is the effective
configuration written next to every generated dataset.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .fields import Material, ParticleLayerSpec
from .geometry import PinholeCamera, RigidTransform, default_focal, default_gel_to_pinhole

__all__ = ["PipelineConfig", "DEFAULTS", "merge_dicts"]

_T_Z = -30.0

DEFAULTS: dict = {
    "layer": ParticleLayerSpec().to_dict(),
    "camera": {
        **default_gel_to_pinhole(_T_Z).to_dict(),
        **PinholeCamera(default_focal(_T_Z), (220.0, 220.0), (440, 440)).to_dict(),
    },
    "fields": {
        "grid_spacing_mm": 0.5,
        "idw_power": 2.0,
        "idw_k_neighbors": 8,
        "fem_node_spacing_mm": 1.0,
        "fem_node_jitter": 0.25,
    },
    "material": {
        "shear_modulus_mpa": 0.05,
        "poisson": 0.45,
        "surface_z_mm": 6.0,
        "indenter_radius_mm": 5.0,
        "force_node_spacing_mm": 0.5,
    },
    "visibility": {
        "n_configs": 100,
        "bin_dims": [15, 15, 9],
        "grid_path": None,
    },
    "flow": {"m": 40, "n": 20},
    "augment": {"alpha": 2.0, "sigma": 4.0, "copies": 0},
    "refine": {
        "radius_mm": 2.0,
        "step_mm": 0.05,
        "strategy": "coarse_to_fine",
        "contact_mm": [15.0, 15.0, 1.25],
    },
    "seed": 0,
}


def merge_dicts(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise KeyError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = merge_dicts(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "PipelineConfig":
        cfg = cls(merge_dicts(DEFAULTS, overrides or {}))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        cfg = PipelineConfig(merge_dicts(self.raw, overrides))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # constructing the typed objects runs their invariant checks
        self.layer, self.camera, self.gel_to_pinhole, self.material
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.grid_spacing <= 0:
            raise ValueError("grid spacing must be positive")

    @property
    def layer(self) -> ParticleLayerSpec:
        return ParticleLayerSpec.from_dict(self.raw["layer"])

    @property
    def camera(self) -> PinholeCamera:
        return PinholeCamera.from_dict(self.raw["camera"])

    @property
    def gel_to_pinhole(self) -> RigidTransform:
        return RigidTransform.from_dict(self.raw["camera"])

    @property
    def material(self) -> Material:
        m = self.raw["material"]
        return Material(m["shear_modulus_mpa"], m["poisson"])

    @property
    def surface_z(self) -> float:
        return float(self.raw["material"]["surface_z_mm"])

    @property
    def indenter_radius(self) -> float:
        return float(self.raw["material"]["indenter_radius_mm"])

    @property
    def force_node_spacing(self) -> float:
        return float(self.raw["material"]["force_node_spacing_mm"])

    @property
    def grid_spacing(self) -> float:
        return float(self.raw["fields"]["grid_spacing_mm"])

    @property
    def idw_power(self) -> float:
        return float(self.raw["fields"]["idw_power"])

    @property
    def idw_k(self) -> int:
        return int(self.raw["fields"]["idw_k_neighbors"])

    @property
    def m(self) -> int:
        return int(self.raw["flow"]["m"])

    @property
    def n(self) -> int:
        return int(self.raw["flow"]["n"])

    @property
    def surface_extent(self) -> tuple[tuple[float, float], tuple[float, float]]:
        lay = self.layer
        return (
            (lay.origin[0], lay.origin[0] + lay.extent[0]),
            (lay.origin[1], lay.origin[1] + lay.extent[1]),
        )

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])
