"""Joint masked-image reconstruction and momentum contrastive pretraining for a small numpy ViT."""

from .model import ConfigError, ModelConfig
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = ["ConfigError", "ModelConfig", "TrainConfig", "__version__"]
