"""Shared data containers passed between the model, losses, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class VideoClip:
    """A video as T frames of H x W x 3 uint8 pixels plus identity metadata."""

    frames: np.ndarray  # (T, H, W, 3) uint8
    video_id: int = 0
    file_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Frames as a (T, 3, H, W) tensor scaled to [-1, 1]."""
        x = torch.from_numpy(np.ascontiguousarray(self.frames)).to(dtype)
        x = x.permute(0, 3, 1, 2) / 255.0
        return x * 2.0 - 1.0


@dataclass
class VideoAnnotation:
    """Ground-truth instances for one clip.

    Frames where an instance is not annotated (off-screen / fully occluded)
    are marked absent via ``present`` and excluded from loss averaging.
    """

    labels: torch.Tensor   # (G,) long, contiguous class indices
    boxes: torch.Tensor    # (T, G, 4) normalized cxcywh; rows for absent frames are zeros
    masks: torch.Tensor    # (T, G, H, W) bool
    present: torch.Tensor  # (T, G) bool

    def __post_init__(self):
        T, G = self.present.shape
        if self.labels.shape != (G,):
            raise ValueError("labels/present instance counts disagree")
        if self.boxes.shape != (T, G, 4):
            raise ValueError("boxes must be (T, G, 4)")
        if self.masks.shape[:2] != (T, G):
            raise ValueError("masks must be (T, G, H, W)")
        if G and not bool(self.present.any(dim=0).all()):
            raise ValueError("every instance needs at least one present frame")

    @property
    def num_instances(self) -> int:
        return self.labels.shape[0]

    @property
    def num_frames(self) -> int:
        return self.present.shape[0]


@dataclass
class PredictionSet:
    """Video-level model output for one clip."""

    class_probs: torch.Tensor  # (N, K+1) rows sum to 1; last column is no-object
    boxes: torch.Tensor        # (T, N, 4) normalized cxcywh
    mask_logits: torch.Tensor | None = None  # (T, N, h, w) at 1/8 input resolution

    def __post_init__(self):
        rows = self.class_probs.sum(dim=-1)
        if not torch.allclose(rows, torch.ones_like(rows), atol=1e-5):
            raise ValueError("class rows must sum to 1")

    @property
    def scores(self) -> torch.Tensor:
        """Per-query score: highest non-background class probability."""
        return self.class_probs[:, :-1].max(dim=-1).values
