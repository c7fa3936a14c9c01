"""Nested UNet segmentation with attention and edge enhancement, built on a
small numpy reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .losses import LossConfig, compute_loss
from .metrics import MetricReport, all_metrics, evaluate_dataset
from .model import ModelConfig, NestedUNet, build, count_params, estimate_flops
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig

__all__ = [
    "LossConfig", "MetricReport", "ModelConfig", "NestedUNet", "Tensor", "TrainConfig",
    "all_metrics", "backward", "build", "compute_loss", "count_params", "estimate_flops",
    "evaluate_dataset", "no_grad",
]
