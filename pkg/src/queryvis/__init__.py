"""Video instance segmentation with video-level instance queries decomposed
into per-frame box queries, dynamic mask heads, and sequence-level matching."""

from .config import RunConfig, desk_config, paper_scale_config, tiny_config
from .model import VideoInstanceModel
from .structures import PredictionSet, VideoAnnotation, VideoClip

__all__ = [
    "RunConfig",
    "VideoInstanceModel",
    "PredictionSet",
    "VideoAnnotation",
    "VideoClip",
    "desk_config",
    "paper_scale_config",
    "tiny_config",
]

__version__ = "0.1.0"
