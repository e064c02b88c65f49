"""Per-frame feature extraction: conv backbone + deformable transformer encoder.

Every stage treats frames independently; nothing here mixes information
across time (the ``flatten`` ablation path is the deliberate exception).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .deformattn import DeformableAttention, encoder_reference_grid


class ConvBackbone(nn.Module):
    """Small strided conv net emitting multi-scale maps for one frame at a time.

    Stages halve resolution; the maps whose strides appear in ``strides`` are
    returned (channel counts grow per stage). Group normalization keeps the
    net batch-size independent.
    """

    def __init__(self, strides: tuple[int, ...] = (4, 8), base_channels: int = 16,
                 in_channels: int = 3):
        super().__init__()
        if list(strides) != sorted(set(strides)):
            raise ValueError("strides must be strictly increasing")
        if any(s < 2 or s & (s - 1) for s in strides):
            raise ValueError("strides must be powers of two >= 2")
        self.strides = tuple(strides)

        num_stages = int(math.log2(max(strides)))
        blocks = []
        channels = []
        c_in = in_channels
        c_out = base_channels
        for _ in range(num_stages):
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, c_out), c_out),
                nn.ReLU(inplace=True),
                nn.Conv2d(c_out, c_out, 3, padding=1),
                nn.GroupNorm(min(8, c_out), c_out),
                nn.ReLU(inplace=True),
            ))
            channels.append(c_out)
            c_in = c_out
            c_out = min(c_out * 2, 256)
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = [channels[int(math.log2(s)) - 1] for s in strides]

    def forward_frame(self, frame: torch.Tensor) -> list[torch.Tensor]:
        """(3, H, W) -> list of (C_l, H/s, W/s) maps, one per configured stride."""
        x = frame[None]
        maps = {}
        stride = 1
        for block in self.blocks:
            x = block(x)
            stride *= 2
            if stride in self.strides:
                maps[stride] = x[0]
        return [maps[s] for s in self.strides]

    def forward(self, frames: torch.Tensor) -> list[list[torch.Tensor]]:
        """(T, 3, H, W) -> per-frame pyramids; frames processed independently."""
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ValueError("expected a non-empty (T, 3, H, W) clip")
        return [self.forward_frame(frames[t]) for t in range(frames.shape[0])]


def sine_position_encoding(height: int, width: int, dim: int,
                           dtype=torch.float32, device=None,
                           temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2D sine/cosine encoding, (dim, height, width).

    Half the channels encode y, half x; each position's vector has L2 norm
    sqrt(dim / 2). No temporal component: encodings depend on the spatial
    location only.
    """
    if height <= 0 or width <= 0:
        raise ValueError("positive shape required")
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4 for paired sin/cos per axis")
    half = dim // 2
    ys = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height * 2 * math.pi
    xs = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width * 2 * math.pi
    freq = temperature ** (torch.arange(half // 2, dtype=dtype, device=device) / (half // 2))

    def encode_axis(coords):
        args = coords[:, None] / freq[None, :]
        enc = torch.zeros(coords.shape[0], half, dtype=dtype, device=device)
        enc[:, 0::2] = args.sin()
        enc[:, 1::2] = args.cos()
        return enc

    enc_y = encode_axis(ys)  # (H, half)
    enc_x = encode_axis(xs)  # (W, half)
    out = torch.cat([
        enc_y[:, None, :].expand(height, width, half),
        enc_x[None, :, :].expand(height, width, half),
    ], dim=-1)
    return out.permute(2, 0, 1)


class DeformableEncoderLayer(nn.Module):
    """Pre-norm block: deformable self-attention over the pyramid + FFN."""

    def __init__(self, dim: int, num_heads: int, num_levels: int, num_points: int,
                 ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn = DeformableAttention(dim, num_heads, num_levels, num_points)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True),
            nn.Dropout(dropout), nn.Linear(ffn_dim, dim), nn.Dropout(dropout))
        self.dropout = nn.Dropout(dropout)

    def forward(self, tokens: torch.Tensor, pos: torch.Tensor,
                references: torch.Tensor, level_shapes: list[tuple[int, int]]):
        x = self.norm1(tokens)
        levels = unflatten_levels(x, level_shapes)
        attn = self.attn(x + pos, references, levels)
        tokens = tokens + self.dropout(attn)
        tokens = tokens + self.ffn(self.norm2(tokens))
        return tokens


def flatten_levels(levels: list[torch.Tensor]) -> torch.Tensor:
    """List of (C, H_l, W_l) -> (S, C) token matrix in level order."""
    return torch.cat([lvl.flatten(1).t() for lvl in levels], dim=0)


def unflatten_levels(tokens: torch.Tensor, level_shapes: list[tuple[int, int]]):
    """(S, C) tokens -> list of (C, H_l, W_l) maps."""
    maps = []
    start = 0
    for h, w in level_shapes:
        chunk = tokens[start:start + h * w]
        maps.append(chunk.t().reshape(-1, h, w))
        start += h * w
    return maps


class VideoFeatureEncoder(nn.Module):
    """Backbone + per-level projection + stacked deformable encoder layers.

    Produces one encoded pyramid per frame with the same shapes as the input
    pyramid. With ``flatten=True`` (ablation), the levels of all frames of a
    fixed-length clip are concatenated into one key set, which deliberately
    breaks per-frame independence.
    """

    def __init__(self, dim: int = 64, num_layers: int = 2, num_heads: int = 8,
                 num_points: int = 4, ffn_dim: int | None = None,
                 strides: tuple[int, ...] = (4, 8), backbone_channels: int = 16,
                 dropout: float = 0.0, flatten: bool = False,
                 flatten_frames: int | None = None):
        super().__init__()
        if flatten and not flatten_frames:
            raise ValueError("flatten mode needs a fixed clip length (flatten_frames)")
        self.dim = dim
        self.flatten = flatten
        self.flatten_frames = flatten_frames
        self.backbone = ConvBackbone(strides=strides, base_channels=backbone_channels)
        self.strides = self.backbone.strides
        self.num_levels = len(self.strides)

        self.input_projs = nn.ModuleList([
            nn.Sequential(nn.Conv2d(c, dim, 1), nn.GroupNorm(min(8, dim), dim))
            for c in self.backbone.out_channels])
        self.level_embed = nn.Parameter(torch.zeros(self.num_levels, dim))
        nn.init.normal_(self.level_embed)

        attn_levels = self.num_levels * flatten_frames if flatten else self.num_levels
        ffn_dim = ffn_dim or dim * 4
        self.layers = nn.ModuleList([
            DeformableEncoderLayer(dim, num_heads, attn_levels, num_points,
                                   ffn_dim, dropout)
            for _ in range(num_layers)])

    def project_frame(self, raw_levels: list[torch.Tensor]) -> list[torch.Tensor]:
        return [proj(lvl[None])[0] for proj, lvl in zip(self.input_projs, raw_levels)]

    def _frame_pos(self, level_shapes, dtype, device) -> torch.Tensor:
        chunks = []
        for i, (h, w) in enumerate(level_shapes):
            pos = sine_position_encoding(h, w, self.dim, dtype=dtype, device=device)
            chunks.append(pos.flatten(1).t() + self.level_embed[i][None, :])
        return torch.cat(chunks, dim=0)

    def _encode_tokens(self, tokens, pos, refs, level_shapes):
        for layer in self.layers:
            tokens = layer(tokens, pos, refs, level_shapes)
        return tokens

    def forward(self, frames: torch.Tensor) -> list[list[torch.Tensor]]:
        """(T, 3, H, W) -> per-frame encoded pyramids, shapes preserved."""
        pyramids = [self.project_frame(raw) for raw in self.backbone(frames)]
        level_shapes = [tuple(lvl.shape[-2:]) for lvl in pyramids[0]]
        dtype, device = frames.dtype, frames.device

        if self.flatten:
            T = len(pyramids)
            if T != self.flatten_frames:
                raise ValueError(
                    f"flatten mode was built for T={self.flatten_frames}, got {T}")
            all_levels = [lvl for pyr in pyramids for lvl in pyr]
            all_shapes = [tuple(lvl.shape[-2:]) for lvl in all_levels]
            tokens = flatten_levels(all_levels)
            pos = torch.cat([self._frame_pos(level_shapes, dtype, device)] * T, dim=0)
            refs = encoder_reference_grid(all_shapes, dtype=dtype, device=device)
            tokens = self._encode_tokens(tokens, pos, refs, all_shapes)
            per_frame = tokens.chunk(T, dim=0)
            return [unflatten_levels(chunk, level_shapes) for chunk in per_frame]

        pos = self._frame_pos(level_shapes, dtype, device)
        refs = encoder_reference_grid(level_shapes, dtype=dtype, device=device)
        encoded = []
        for pyramid in pyramids:
            tokens = flatten_levels(pyramid)
            tokens = self._encode_tokens(tokens, pos, refs, level_shapes)
            encoded.append(unflatten_levels(tokens, level_shapes))
        return encoded
