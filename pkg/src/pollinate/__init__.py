"""
pollinate - plant skeletons, main-stem grasps and stem vibration

Reconstructs a plant skeleton from masked multi-view depth data, plans a
collision-aware 7-DoF grasp on the main stem, and simulates how vibration
applied at the grasp travels to the flower with a branched discrete elastic
rod model, checked against Euler-Bernoulli beam oracles.
"""

__version__ = "1.0.0"
__author__ = "pollinate developers"
__description__ = "Vibration-assisted pollination: skeletonization, grasp planning and rod dynamics"

# Package metadata
__all__ = [
    "__author__",
    "__description__",
    "__version__",
]

# Import main components for easy access
from .config import PipelineConfig, load_config
from .dersim import ElasticState, RodNetwork, run, static_solve, step
from .errors import PollinateError
from .fusion import fuse_views, icp_refine, voxelize
from .graspplan import find_main_stem, plan_grasp
from .models import (
    ActuationProfile,
    GraspPose,
    MaterialParams,
    PointCloud,
    RigidTransform,
    SimplifiedSkeleton,
    SweepResult,
    TimeSeries,
    VoxelGrid,
)
from .skeleton import skeletonize_cloud

# Make key components available at package level
__all__.extend(
    [
        "ActuationProfile",
        "ElasticState",
        "GraspPose",
        "MaterialParams",
        "PipelineConfig",
        "PointCloud",
        "PollinateError",
        "RigidTransform",
        "RodNetwork",
        "SimplifiedSkeleton",
        "SweepResult",
        "TimeSeries",
        "VoxelGrid",
        "find_main_stem",
        "fuse_views",
        "icp_refine",
        "load_config",
        "plan_grasp",
        "run",
        "skeletonize_cloud",
        "static_solve",
        "step",
        "voxelize",
    ]
)
