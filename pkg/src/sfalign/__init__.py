"""Flow-aligned feature pyramids for semantic segmentation, in numpy.

The package is organized the way you would poke at it from a notebook:
tensors and ops in `tensor`, warping in `warp`, the model in `model`,
training in `train`, scoring in `metrics`, synthetic data in `data`,
rendering in `viz`, and a CLI in `cli` tying it together.
"""

from .errors import ConfigError, DataError, NumericError
from .model import FamConfig, ModelConfig, count_flops, init_params, model_forward
from .train import TrainConfig, train_loop
from .data import gen_synthetic, load_dataset
from .metrics import evaluate
from .gradcheck import run_all as run_gradient_checks

__all__ = [
    "ConfigError", "DataError", "NumericError",
    "FamConfig", "ModelConfig", "TrainConfig",
    "count_flops", "init_params", "model_forward",
    "train_loop", "evaluate",
    "gen_synthetic", "load_dataset",
    "run_gradient_checks",
]
