"""Multi-task learning with learned loss weights and auxiliary tasks, at desk scale."""

from .losses import PAPER_TASK_SETS, Regularizer, TaskId, TaskWeights, combine_fixed, combine_learned
from .metrics import MetricRecord, accuracy, depth_rmse, miou, rmsctd
from .model import Model, ModelConfig, build_model, load_checkpoint, predict, save_checkpoint
from .scenegen import SceneDistribution, SplitSpec, generate_dataset, generate_sample, spatial_split
from .tensor import Tensor, backward, grad_check
from .trainer import ExperimentSpec, Hyperparams, TaskData, TrainHistory, WeightingMode, run_matrix, train

__all__ = [
    "ExperimentSpec",
    "Hyperparams",
    "MetricRecord",
    "Model",
    "ModelConfig",
    "PAPER_TASK_SETS",
    "Regularizer",
    "SceneDistribution",
    "SplitSpec",
    "TaskData",
    "TaskId",
    "TaskWeights",
    "Tensor",
    "TrainHistory",
    "WeightingMode",
    "accuracy",
    "backward",
    "build_model",
    "combine_fixed",
    "combine_learned",
    "depth_rmse",
    "generate_dataset",
    "generate_sample",
    "grad_check",
    "load_checkpoint",
    "miou",
    "predict",
    "rmsctd",
    "run_matrix",
    "save_checkpoint",
    "spatial_split",
    "train",
]

__version__ = "0.1.0"
