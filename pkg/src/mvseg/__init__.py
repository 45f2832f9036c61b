"""Joint semantic and instance segmentation of 3D point clouds.

A pointwise multi-task network predicts class probabilities and instance
embeddings per window; mean shift proposes instances; a multi-value CRF
refines both label sets jointly; windows are merged and instances scored.
"""

from .config import ConfigError, CrfConfig, LossConfig, RunConfig, TrainConfig, load_config
from .pipeline import segment_scene
from .scene_io import PointCloud, read_ply, write_ply

__all__ = [
    "ConfigError",
    "CrfConfig",
    "LossConfig",
    "PointCloud",
    "RunConfig",
    "TrainConfig",
    "load_config",
    "read_ply",
    "segment_scene",
    "write_ply",
]
__version__ = "0.1.0"
