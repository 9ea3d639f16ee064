"""Graph-attention spatial aggregation feeding a frozen transformer backbone
for spatiotemporal imputation, with masking protocols, metrics and baselines."""

from ._kernels import BACKEND
from .backbone import ModelConfig, ModelParams, init_model, model_forward
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import (
    AdjacencyMatrix, DataError, EvalMask, SplitSpec, TimeSeriesTensor, build_adjacency,
    gen_block_mask, gen_point_mask, load_csv, normalize, denormalize, split_chronological,
)
from .evaluation import MetricsReport, baseline_da, baseline_knn, baseline_mean, evaluate, sweep
from .training import TrainConfig, fit, impute, masked_loss

__version__ = "0.1.0"
