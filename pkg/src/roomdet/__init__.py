"""roomdet: a from-scratch hybrid CNN/transformer indoor object detector.

Everything runs on a small numpy-backed autodiff engine: model blocks,
losses, the training loop, and COCO-style evaluation, plus a train / eval /
infer / bench / inspect command line.
"""

from .model import ModelConfig, build, count_flops, count_params, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, bench, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "Tensor",
    "bench",
    "build",
    "count_flops",
    "count_params",
    "evaluate",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "train",
    "__version__",
]
