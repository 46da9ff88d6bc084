"""Zero-shot any-speaker text-to-speech with a style-conditioned diffusion prior."""

from .audio import FeatureConfig, MelSpectrogram, MelStats
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig, TrainConfig, DiffusionConfig, load_config
from .model import StyleDiffTTS

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DiffusionConfig",
    "FeatureConfig",
    "MelSpectrogram",
    "MelStats",
    "ModelConfig",
    "RunConfig",
    "StyleDiffTTS",
    "TrainConfig",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
]
