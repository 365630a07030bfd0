"""MMNet: multi-query referring image segmentation with a score-weighted
multi-mask decoder, trained on a built-in synthetic shapes dataset."""

from .autodiff import Tensor, set_default_dtype
from .config import ModelConfig, TrainConfig, load_config
from .model import MMNet

__all__ = ["Tensor", "set_default_dtype", "ModelConfig", "TrainConfig",
           "load_config", "MMNet"]

__version__ = "0.1.0"
