"""Object-aware query anchor initialisation for LiDAR-camera 3D detectors."""

__version__ = "0.1.0"

from .dqb import BalanceConfig, assemble, run_pipeline  # noqa: E402
from .scene_io import AnchorSet, QueryAnchor, Scene  # noqa: E402

__all__ = ["AnchorSet", "BalanceConfig", "QueryAnchor", "Scene", "assemble", "run_pipeline"]
