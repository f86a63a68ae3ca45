"""Domain-generalized LiDAR semantic segmentation with an auxiliary bird's-eye-view head."""

from ._ext import BACKEND
from .bev import BevProjectionConfig, project_index, project_labels, write_pgm, read_pgm
from .core import IGNORE, ClassVocabulary, LabelRemap, PointCloud, load_labels, load_scan
from .errors import FormatError, LidogError, NumericError, UsageError, ValidationError
from .eval import ConfusionMatrix, ExperimentSpec, accumulate, iou, miou, run_experiment
from .net import ModelConfig, ModelParams, init_params
from .train import TrainConfig, dice_loss, train
from .voxel import VoxelGrid, voxelize

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BevProjectionConfig",
    "project_index",
    "project_labels",
    "write_pgm",
    "read_pgm",
    "IGNORE",
    "ClassVocabulary",
    "LabelRemap",
    "PointCloud",
    "load_labels",
    "load_scan",
    "FormatError",
    "LidogError",
    "NumericError",
    "UsageError",
    "ValidationError",
    "ConfusionMatrix",
    "ExperimentSpec",
    "accumulate",
    "iou",
    "miou",
    "run_experiment",
    "ModelConfig",
    "ModelParams",
    "init_params",
    "TrainConfig",
    "dice_loss",
    "train",
    "VoxelGrid",
    "voxelize",
]
