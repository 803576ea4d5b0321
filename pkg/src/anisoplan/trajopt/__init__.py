"""Spatiotemporal polynomial trajectory refinement."""
from .config import MotionLimits, OptConfig
from .costs import (
    box_violation,
    ellipse_violation,
    energy_cost,
    max_violation,
    min_clearance,
    obstacle_cost,
    time_cost,
)
from .poly import PolyTrajectory, from_coarse
from .solver import OptResult, init_from_coarse, optimize

__all__ = [
    "MotionLimits",
    "OptConfig",
    "OptResult",
    "PolyTrajectory",
    "box_violation",
    "ellipse_violation",
    "energy_cost",
    "from_coarse",
    "init_from_coarse",
    "max_violation",
    "min_clearance",
    "obstacle_cost",
    "optimize",
    "time_cost",
]
