"""Mixed-supervision dual-network segmentation on a small numpy autograd engine."""
from .errors import ConfigError, ContractError, DataError, DimensionError, FormatError, MSDNError, SchemaError
from .estimator import MSDNSegmenter
from .model import MSDN, build_msdn, count_parameters, detect
from .tensor import Tensor, gradcheck, no_grad, precision
from .train import TrainConfig, Trainer, evaluate, train

__all__ = [
    "MSDN", "MSDNSegmenter", "Tensor", "TrainConfig", "Trainer", "build_msdn", "count_parameters", "detect",
    "evaluate", "gradcheck", "no_grad", "precision", "train",
    "ConfigError", "ContractError", "DataError", "DimensionError", "FormatError", "MSDNError", "SchemaError",
]
__version__ = "0.1.0"
