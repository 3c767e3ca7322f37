"""Isolated-channel vision transformers for multi-channel imaging.

Single-channel self-distillation pretraining, full-channel fine-tuning and
the analyses used to study them, on a small numpy autodiff engine.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import ConfigError, ContractError, FormatError, LoadError, NumericalError, ShapeError
from .sampling import ChannelMask, SamplingStrategy
from .vit import ViTConfig

__all__ = [
    "ChannelMask", "ConfigError", "ContractError", "FormatError", "LoadError", "NumericalError",
    "RunConfig", "SamplingStrategy", "ShapeError", "ViTConfig", "__version__",
]
