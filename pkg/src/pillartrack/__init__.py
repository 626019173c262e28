"""pillartrack: Siamese 3D single-object tracking on pillarized BEV features."""

__version__ = "0.1.0"

from .config import RunConfig
from .geometry import Box3D, TrackScore, center_distance, iou3d, precision_auc, success_auc
from .model import ModelConfig, TrackNet, build_model
from .pillars import PillarConfig, PointCloud
from .synthdata import ScenarioConfig, generate_sequence
from .tracker import Sequence, evaluate_sequences, track_sequence

__all__ = [
    "Box3D",
    "ModelConfig",
    "PillarConfig",
    "PointCloud",
    "RunConfig",
    "ScenarioConfig",
    "Sequence",
    "TrackNet",
    "TrackScore",
    "build_model",
    "center_distance",
    "evaluate_sequences",
    "generate_sequence",
    "iou3d",
    "precision_auc",
    "success_auc",
    "track_sequence",
]
