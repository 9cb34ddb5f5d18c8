"""Multi-query transformer for multi-task dense prediction."""

from .model import MQTConfig, MQTransformer, TaskSpec
from .tensor import Tensor, backward, no_grad

__all__ = ["MQTConfig", "MQTransformer", "TaskSpec", "Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
