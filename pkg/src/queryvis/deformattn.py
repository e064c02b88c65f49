"""Multi-scale deformable attention over a single frame's feature pyramid.

Each query predicts, per head, per pyramid level, a small set of sampling
offsets around its reference point (or reference box) plus a softmax weight
per sampled location; the output is the weighted sum of bilinearly sampled
value projections. The temporal axis is never part of the key set; a
``flatten``-style caller may still pass the levels of several frames
concatenated as extra levels (ablation path).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class DeformableAttention(nn.Module):
    """DeformAttn(query, pyramid): sparse sampled attention on one frame.

    Args:
        dim: model width C; must be divisible by num_heads.
        num_heads: attention heads.
        num_levels: pyramid levels the value set will contain.
        num_points: sampling points per head per level.
    """

    def __init__(self, dim: int, num_heads: int = 8, num_levels: int = 2,
                 num_points: int = 4):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.head_dim = dim // num_heads

        self.sampling_offsets = nn.Linear(dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self):
        # Zero offset weights with a fixed radial bias: initial sampling points
        # form a small ring around the reference instead of collapsing onto it.
        nn.init.zeros_(self.sampling_offsets.weight)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) \
            * (2.0 * math.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for k in range(self.num_points):
            grid[:, :, k, :] *= (k + 1) / self.num_points
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling_locations(self, query: torch.Tensor, reference: torch.Tensor,
                           level_shapes: list[tuple[int, int]]) -> torch.Tensor:
        """Normalized (Q, heads, L, K, 2) sampling locations for diagnostics/forward.

        With a 2-dim reference the offsets are divided by the level resolution;
        with a 4-dim reference box they are scaled by half the box extent.
        """
        Q = query.shape[0]
        offsets = self.sampling_offsets(query).view(
            Q, self.num_heads, self.num_levels, self.num_points, 2)
        if reference.shape[-1] == 2:
            wh = query.new_tensor([[w, h] for (h, w) in level_shapes])  # (L, 2)
            return reference[:, None, None, None, :] + offsets / wh[None, None, :, None, :]
        if reference.shape[-1] == 4:
            center = reference[:, None, None, None, :2]
            half = reference[:, None, None, None, 2:] / 2
            return center + offsets * half
        raise ValueError("reference must have 2 (point) or 4 (box) components")

    def forward(self, query: torch.Tensor, reference: torch.Tensor,
                levels: list[torch.Tensor], return_locations: bool = False):
        """Attend from queries into one frame's pyramid.

        Args:
            query: (Q, C)
            reference: (Q, 2) normalized points or (Q, 4) normalized cxcywh boxes.
            levels: list of num_levels maps, each (C, H_l, W_l).
            return_locations: also return the (Q, heads, L, K, 2) sample grid.

        Returns:
            (Q, C) output, optionally with the sampling locations.
        """
        if len(levels) != self.num_levels:
            raise ValueError(f"expected {self.num_levels} levels, got {len(levels)}")
        if not torch.isfinite(query).all():
            raise ValueError("non-finite values in query")
        for lvl in levels:
            if not torch.isfinite(lvl).all():
                raise ValueError("non-finite values in feature pyramid")

        Q = query.shape[0]
        level_shapes = [tuple(lvl.shape[-2:]) for lvl in levels]
        locations = self.sampling_locations(query, reference, level_shapes)

        weights = self.attention_weights(query).view(
            Q, self.num_heads, self.num_levels * self.num_points)
        weights = weights.softmax(dim=-1).view(
            Q, self.num_heads, self.num_levels, self.num_points)

        out = query.new_zeros(self.num_heads, self.head_dim, Q)
        for l, lvl in enumerate(levels):
            C, H, W = lvl.shape
            value = self.value_proj(lvl.flatten(1).t())  # (H*W, C)
            value = value.view(H, W, self.num_heads, self.head_dim) \
                .permute(2, 3, 0, 1)  # (heads, head_dim, H, W)
            grid = locations[:, :, l].permute(1, 0, 2, 3) * 2 - 1  # (heads, Q, K, 2)
            sampled = F.grid_sample(value, grid, mode="bilinear",
                                    padding_mode="zeros", align_corners=False)
            # (heads, head_dim, Q, K) weighted by (Q, heads, K)
            w = weights[:, :, l].permute(1, 0, 2)  # (heads, Q, K)
            out = out + (sampled * w[:, None, :, :]).sum(dim=-1)

        out = out.permute(2, 0, 1).reshape(Q, self.dim)
        out = self.output_proj(out)
        if return_locations:
            return out, locations
        return out


def encoder_reference_grid(level_shapes: list[tuple[int, int]],
                           dtype=torch.float32, device=None) -> torch.Tensor:
    """One normalized pixel-center reference point per location, all levels.

    Returns (S, 2) with S the total number of pyramid locations, concatenated
    in level order, rows flattened row-major within a level.
    """
    points = []
    for h, w in level_shapes:
        if h <= 0 or w <= 0:
            raise ValueError("level shapes must be positive")
        ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        points.append(torch.stack([gx, gy], dim=-1).reshape(-1, 2))
    return torch.cat(points, dim=0)
