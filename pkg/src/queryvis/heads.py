"""Output heads: classification, per-frame boxes, mask branch, and the
instance-conditioned dynamic mask head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import maskops
from .geometry import inverse_sigmoid
from .structures import PredictionSet

# Three 1x1 conv layers (10->8), (8->8), (8->1): weights + biases.
MASK_HEAD_CHANNELS = (10, 8, 8, 1)
MASK_HEAD_PARAM_COUNT = sum(
    c_in * c_out + c_out
    for c_in, c_out in zip(MASK_HEAD_CHANNELS[:-1], MASK_HEAD_CHANNELS[1:]))  # 169

MASK_BRANCH_CHANNELS = 8
MASK_OUT_STRIDE = 8


class MLP(nn.Module):
    """Feed-forward stack with ReLU between layers (DETR-style head body)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class ClassHead(nn.Module):
    """Linear projection to K+1 class logits; one distribution per video-level query."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.proj = nn.Linear(dim, num_classes + 1)

    def forward(self, inst_embeddings: torch.Tensor) -> torch.Tensor:
        return self.proj(inst_embeddings)  # (N, K+1) logits


class BoxHead(nn.Module):
    """3-layer FFN predicting per-frame boxes as logit-space deltas.

    The prediction is sigmoid(mlp(x) + logit(reference)), so a zero delta
    reproduces the reference box exactly (up to the logit clamp).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP(dim, dim, 4, 3)
        nn.init.zeros_(self.mlp.layers[-1].weight)
        nn.init.zeros_(self.mlp.layers[-1].bias)

    def forward(self, box_embeddings: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
        delta = self.mlp(box_embeddings)
        return (delta + inverse_sigmoid(references)).sigmoid()


class MaskController(nn.Module):
    """3-layer FFN turning an instance embedding into the 169 mask-head weights."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP(dim, dim, MASK_HEAD_PARAM_COUNT, 3)

    def forward(self, inst_embeddings: torch.Tensor) -> torch.Tensor:
        return self.mlp(inst_embeddings)  # (N, 169)


class MaskBranch(nn.Module):
    """FPN-like top-down fusion of the encoded pyramid into one 8-channel map
    per frame at 1/8 input resolution."""

    def __init__(self, dim: int, strides: tuple[int, ...],
                 out_channels: int = MASK_BRANCH_CHANNELS,
                 out_stride: int = MASK_OUT_STRIDE):
        super().__init__()
        self.used = [i for i, s in enumerate(strides) if s >= out_stride]
        if not self.used:
            raise ValueError(f"mask branch needs a level with stride >= {out_stride}")
        self.out_stride = out_stride
        self.laterals = nn.ModuleList(nn.Conv2d(dim, dim, 1) for _ in self.used)
        self.smooth = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.GroupNorm(min(8, dim), dim),
            nn.ReLU(inplace=True))
        self.out_conv = nn.Conv2d(dim, out_channels, 1)

    def forward_frame(self, levels: list[torch.Tensor],
                      frame_size: tuple[int, int]) -> torch.Tensor:
        """One frame's encoded pyramid -> (8, H/8, W/8)."""
        used = [levels[i] for i in self.used]  # fine -> coarse
        x = self.laterals[-1](used[-1][None])
        for lat, lvl in zip(reversed(self.laterals[:-1]), reversed(used[:-1])):
            x = F.interpolate(x, size=lvl.shape[-2:], mode="nearest")
            x = x + lat(lvl[None])
        target = (frame_size[0] // self.out_stride, frame_size[1] // self.out_stride)
        if x.shape[-2:] != target:
            x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
        x = self.smooth(x)
        return self.out_conv(x)[0]

    def forward(self, frame_levels: list[list[torch.Tensor]],
                frame_size: tuple[int, int]) -> torch.Tensor:
        """Per-frame independent; returns (T, 8, H/8, W/8)."""
        return torch.stack(
            [self.forward_frame(levels, frame_size) for levels in frame_levels], dim=0)


def coord_map(shape: tuple[int, int], centers: torch.Tensor) -> torch.Tensor:
    """Relative-coordinate maps from box centers, evaluated at pixel centers.

    Args:
        shape: (h, w) of the target map.
        centers: (..., 2) normalized (cx, cy).

    Returns:
        (..., 2, h, w) with channel 0 = x - cx and channel 1 = y - cy in
        frame-normalized units.
    """
    h, w = shape
    ys = (torch.arange(h, dtype=centers.dtype, device=centers.device) + 0.5) / h
    xs = (torch.arange(w, dtype=centers.dtype, device=centers.device) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    cx = centers[..., 0][..., None, None]
    cy = centers[..., 1][..., None, None]
    return torch.stack([gx - cx, gy - cy], dim=-3)


def split_mask_head_params(params: torch.Tensor):
    """(..., 169) -> [(weight, bias)] per conv layer, layer-major, weights first."""
    if params.shape[-1] != MASK_HEAD_PARAM_COUNT:
        raise ValueError(
            f"expected {MASK_HEAD_PARAM_COUNT} mask head parameters, "
            f"got {params.shape[-1]}")
    layers = []
    offset = 0
    for c_in, c_out in zip(MASK_HEAD_CHANNELS[:-1], MASK_HEAD_CHANNELS[1:]):
        weight = params[..., offset:offset + c_in * c_out]
        weight = weight.reshape(*params.shape[:-1], c_out, c_in)
        offset += c_in * c_out
        bias = params[..., offset:offset + c_out]
        offset += c_out
        layers.append((weight, bias))
    return layers


def dynamic_mask_head(features: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Run the three-layer 1x1 conv head on a (10, h, w) map with flat params.

    Pointwise: every spatial position goes through the same tiny MLP whose
    weights came from the controller. Returns (h, w) mask logits.
    """
    if features.shape[0] != MASK_HEAD_CHANNELS[0]:
        raise ValueError(f"expected {MASK_HEAD_CHANNELS[0]}-channel input")
    x = features
    layers = split_mask_head_params(params)
    for i, (weight, bias) in enumerate(layers):
        x = torch.einsum("oc,chw->ohw", weight, x) + bias[:, None, None]
        if i < len(layers) - 1:
            x = F.relu(x)
    return x[0]


def apply_mask_heads(branch_features: torch.Tensor, centers: torch.Tensor,
                     params: torch.Tensor) -> torch.Tensor:
    """Vectorized dynamic mask head over frames and instances.

    Args:
        branch_features: (T, 8, h, w) shared per-frame mask features.
        centers: (T, n, 2) normalized box centers per frame/instance.
        params: (n, 169) controller outputs; one head per instance, shared
            across all frames of the video.

    Returns:
        (T, n, h, w) mask logits.
    """
    T, _, h, w = branch_features.shape
    n = params.shape[0]
    rel = coord_map((h, w), centers)  # (T, n, 2, h, w)
    feats = branch_features[:, None].expand(T, n, MASK_BRANCH_CHANNELS, h, w)
    x = torch.cat([feats, rel], dim=2)  # (T, n, 10, h, w)
    layers = split_mask_head_params(params)
    for i, (weight, bias) in enumerate(layers):
        x = torch.einsum("noc,tnchw->tnohw", weight, x) + bias[None, :, :, None, None]
        if i < len(layers) - 1:
            x = F.relu(x)
    return x[:, :, 0]


@dataclass
class InstanceResult:
    """One ranked video-level instance: a single query's entire track."""

    query_index: int
    label: int          # contiguous class index
    score: float
    boxes: torch.Tensor  # (T, 4) normalized cxcywh
    masks: torch.Tensor  # (T, H, W) bool at full input resolution


def postprocess(prediction: PredictionSet, frame_size: tuple[int, int],
                top_k: int = 10, score_threshold: float = 0.05,
                mask_threshold: float = 0.5) -> list[InstanceResult]:
    """Rank queries by score, keep the confident ones, binarize their masks.

    Identity association costs nothing: all frames of one output instance come
    from the same query index by construction.
    """
    scores = prediction.class_probs[:, :-1].max(dim=-1)
    keep = torch.nonzero(scores.values > score_threshold).flatten()
    keep = keep[scores.values[keep].argsort(descending=True, stable=True)]
    keep = keep[:top_k]

    results = []
    for q in keep.tolist():
        masks = None
        if prediction.mask_logits is not None:
            logits = maskops.resize_mask(prediction.mask_logits[:, q], frame_size,
                                         mode="bilinear")
            masks = logits.sigmoid() > mask_threshold
        results.append(InstanceResult(
            query_index=q,
            label=int(scores.indices[q]),
            score=float(scores.values[q]),
            boxes=prediction.boxes[:, q].detach(),
            masks=masks))
    return results
