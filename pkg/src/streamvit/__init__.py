"""Streaming video backbone with causal temporal attention and a KV cache.

The package is self-contained on top of numpy: a small reverse-mode tensor
library (:mod:`streamvit.autodiff`), the backbone, text tower, sigmoid
alignment losses, a synthetic moving-shapes dataset, the multi-task trainer,
a binary checkpoint container and a latency benchmark.
"""

from .backbone import Backbone, FrameFeatures, StreamSession, VideoClip
from .config import PRESETS, ModelConfig, preset
from .errors import StreamVitError
from .model import StreamModel
from .text import Task
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "FrameFeatures",
    "ModelConfig",
    "PRESETS",
    "StreamModel",
    "StreamSession",
    "StreamVitError",
    "Task",
    "TrainConfig",
    "Trainer",
    "VideoClip",
    "load_checkpoint",
    "preset",
    "save_checkpoint",
]
