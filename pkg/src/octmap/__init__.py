"""Multi-submap neural implicit RGB-D mapping on sparse octree grids."""

from .geometry import Intrinsics, KeyframePacket, Pose, Ray
from .octree import MortonCode, OctreeFeatureGrid
from .render import NeuralField, RayBundle
from .scene import SceneSpec
from .submaps import Submap, SubmapAtlas
from .tracking import PoseGraph, TrajectoryModel

__version__ = "0.1.0"

__all__ = [
    "Intrinsics",
    "KeyframePacket",
    "MortonCode",
    "NeuralField",
    "OctreeFeatureGrid",
    "Pose",
    "PoseGraph",
    "Ray",
    "RayBundle",
    "SceneSpec",
    "Submap",
    "SubmapAtlas",
    "TrajectoryModel",
    "__version__",
]
