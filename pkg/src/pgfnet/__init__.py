"""Progressive gated-fusion network for multimodal sentiment regression, on a numpy autodiff core."""
from .model import AblationFlags, ModelConfig, MultimodalBatch, PGFNet, count_trainable_params
from .tensor import Tensor

__all__ = ["AblationFlags", "ModelConfig", "MultimodalBatch", "PGFNet", "Tensor", "count_trainable_params"]
__version__ = "0.1.0"
