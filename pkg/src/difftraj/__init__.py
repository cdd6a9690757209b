"""Diffusion-based trajectory generation, guided optimization, and
planning on desk-scale 2D navigation and planar-arm worlds."""

from .diffusion import NoiseSchedule, make_schedule
from .estimators import TrajectoryDiffusion
from .objectives import GuidanceContext, GuidanceSpec, GuidanceTerm
from .planner import BehaviorCloningPolicy, PlanEpisode
from .worlds import SceneSpec, generate_scene

__all__ = [
    "NoiseSchedule", "make_schedule", "TrajectoryDiffusion",
    "GuidanceContext", "GuidanceSpec", "GuidanceTerm",
    "BehaviorCloningPolicy", "PlanEpisode", "SceneSpec", "generate_scene",
]

__version__ = "0.1.0"
