"""Multi-robot exploration simulator with latency-bounded rendezvous coordination."""

from .engine import ScenarioConfig, Simulation
from .grid import GridMap, GridPath, Pose
from .scene import Scene, generate_scene, parse_scene

__all__ = ["ScenarioConfig", "Simulation", "GridMap", "GridPath", "Pose",
           "Scene", "generate_scene", "parse_scene"]

__version__ = "0.1.0"
