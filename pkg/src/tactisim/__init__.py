"""Synthetic optical-flow datasets for a vision-based tactile sensor."""

from .config import PipelineConfig
from .fields import GridField, ParticleLayerSpec, ScatteredField
from .flow import FeatureImage, ForceDistribution, NodalForces
from .geometry import PinholeCamera, RigidTransform
from .remap import FisheyeModel, RemapTable
from .visibility import VisibilityGrid

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "GridField",
    "ParticleLayerSpec",
    "ScatteredField",
    "FeatureImage",
    "ForceDistribution",
    "NodalForces",
    "PinholeCamera",
    "RigidTransform",
    "FisheyeModel",
    "RemapTable",
    "VisibilityGrid",
]
