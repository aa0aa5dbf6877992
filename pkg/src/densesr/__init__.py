"""Dense-block convolutional super-resolution for grayscale microscopy images."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BadMagicError,
    CheckpointError,
    ConfigError,
    ContractError,
    DenseSRError,
    ShapeError,
    TruncatedRecordError,
    VersionMismatchError,
    WeightShapeMismatchError,
)
from .model import Network, NetworkConfig, build_network, load_checkpoint, save_checkpoint  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__all__ = [
    "BadMagicError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DenseSRError",
    "Network",
    "NetworkConfig",
    "ShapeError",
    "Tensor",
    "TruncatedRecordError",
    "VersionMismatchError",
    "WeightShapeMismatchError",
    "backward",
    "build_network",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]
