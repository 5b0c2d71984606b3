"""Domain-generalized semantic segmentation with domain-aware prompts, at desk scale."""

from .config import TrainConfig, load_config
from .model import PromptSegmenter
from .segnet import ModelConfig

__all__ = ["ModelConfig", "PromptSegmenter", "TrainConfig", "load_config"]
__version__ = "0.1.0"
