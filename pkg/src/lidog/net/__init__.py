from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    ForwardResult,
    ModelConfig,
    ModelParams,
    SparseBatch,
    Tape,
    backward,
    batch_from_grid,
    forward,
    forward_batch,
    full_gradients,
    init_params,
    make_batch,
    param_shapes,
    predict,
    predict_batch,
    zero_params,
)
from .sparse import Rulebook, SparseGeometry

__all__ = [
    "load_checkpoint",
    "save_checkpoint",
    "ForwardResult",
    "ModelConfig",
    "ModelParams",
    "SparseBatch",
    "Tape",
    "backward",
    "batch_from_grid",
    "forward",
    "forward_batch",
    "full_gradients",
    "init_params",
    "make_batch",
    "param_shapes",
    "predict",
    "predict_batch",
    "zero_params",
    "Rulebook",
    "SparseGeometry",
]
