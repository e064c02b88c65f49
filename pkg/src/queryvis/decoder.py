"""Query-decompose transformer decoder.

A fixed set of video-level instance queries is decomposed at the first layer
into one box query per frame. Box queries attend into their own frame only
and never interact with each other; after every layer their features are
aggregated back into the instance query (weighted over frames), and per-frame
reference boxes are refined coarse-to-fine from the box predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .deformattn import DeformableAttention
from .geometry import inverse_sigmoid

AGGREGATION_MODES = ("sum", "average", "weighted")


class TemporalAggregator(nn.Module):
    """Fold per-frame box queries back into the video-level instance query.

    ``weighted`` learns a scalar logit per (frame, query) and normalizes with
    a softmax across frames, so the weights are positive and sum to one;
    ``sum`` and ``average`` are the ablation variants. All modes add the
    incoming instance query as a residual.
    """

    def __init__(self, dim: int, mode: str = "weighted"):
        super().__init__()
        if mode not in AGGREGATION_MODES:
            raise ValueError(f"aggregation mode must be one of {AGGREGATION_MODES}")
        self.mode = mode
        self.frame_logit = nn.Linear(dim, 1)

    def forward(self, box_queries: torch.Tensor, inst_queries: torch.Tensor,
                frame_mask: torch.Tensor | None = None):
        """box_queries (T, N, C), inst_queries (N, C) -> (new inst, (T, N) weights).

        ``frame_mask`` restricts the aggregation to a subset of frames (used
        by the fewer-frames inference mode); excluded frames get weight 0.
        """
        T, N, _ = box_queries.shape
        if frame_mask is None:
            frame_mask = box_queries.new_ones(T, dtype=torch.bool)
        if not bool(frame_mask.any()):
            raise ValueError("at least one frame must participate in aggregation")

        if self.mode == "weighted":
            logits = self.frame_logit(box_queries).squeeze(-1)  # (T, N)
            logits = logits.masked_fill(~frame_mask[:, None], float("-inf"))
            weights = logits.softmax(dim=0)
        elif self.mode == "average":
            count = frame_mask.sum().to(box_queries.dtype)
            weights = (frame_mask[:, None].to(box_queries.dtype) / count).expand(T, N)
        else:  # sum
            weights = frame_mask[:, None].to(box_queries.dtype).expand(T, N)

        pooled = (weights[:, :, None] * box_queries).sum(dim=0)
        return pooled + inst_queries, weights


class DecoderLayer(nn.Module):
    """Self-attention over instance queries, per-frame deformable cross-attention,
    FFN, and temporal aggregation (pre-norm throughout)."""

    def __init__(self, dim: int, num_heads: int, num_levels: int, num_points: int,
                 ffn_dim: int, aggregation: str, dropout: float = 0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout,
                                               batch_first=True)
        self.cross_attn = DeformableAttention(dim, num_heads, num_levels, num_points)
        self.aggregator = TemporalAggregator(dim, aggregation)
        self.norm_sa = nn.LayerNorm(dim)
        self.norm_ca = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True),
            nn.Dropout(dropout), nn.Linear(ffn_dim, dim), nn.Dropout(dropout))
        self.dropout = nn.Dropout(dropout)


@dataclass
class DecoderLayerState:
    """Everything one decoder layer produced, kept for auxiliary supervision."""

    inst_queries: torch.Tensor      # (N, C) after aggregation, unnormalized
    box_queries: torch.Tensor       # (T, N, C) unnormalized
    references: torch.Tensor        # (T, N, 4) boxes the layer attended around
    boxes: torch.Tensor             # (T, N, 4) refined box predictions
    frame_weights: torch.Tensor     # (T, N) aggregation weights
    sampling_locations: list = field(default_factory=list)  # per frame (N, h, L, K, 2)


class QueryDecoder(nn.Module):
    """Stack of decoder layers operating on per-frame encoded pyramids.

    The box head used for iterative reference refinement is passed in by the
    caller so its parameters stay shared with the output heads.
    """

    def __init__(self, dim: int = 64, num_layers: int = 2, num_queries: int = 20,
                 num_heads: int = 8, num_levels: int = 2, num_points: int = 4,
                 ffn_dim: int | None = None, aggregation: str = "weighted",
                 decompose: bool = True, dropout: float = 0.0,
                 detach_references: bool = True):
        super().__init__()
        self.dim = dim
        self.num_queries = num_queries
        self.decompose = decompose
        self.detach_references = detach_references

        ffn_dim = ffn_dim or dim * 4
        self.layers = nn.ModuleList([
            DecoderLayer(dim, num_heads, num_levels, num_points, ffn_dim,
                         aggregation, dropout)
            for _ in range(num_layers)])

        self.query_content = nn.Embedding(num_queries, dim)
        self.query_pos = nn.Embedding(num_queries, dim)
        self.reference_logits = nn.Embedding(num_queries, 4)
        nn.init.normal_(self.query_content.weight)
        nn.init.normal_(self.query_pos.weight)
        nn.init.zeros_(self.reference_logits.weight)

        self.norm_inst = nn.LayerNorm(dim)
        self.norm_box = nn.LayerNorm(dim)

    def initial_references(self, num_frames: int, dtype, device) -> torch.Tensor:
        """Layer-1 reference boxes: per-query learned, shared across frames."""
        ref = self.reference_logits.weight.to(dtype=dtype, device=device).sigmoid()
        return ref[None, :, :].expand(num_frames, -1, -1)

    def forward(self, frame_levels: list[list[torch.Tensor]], box_predictor,
                frame_mask: torch.Tensor | None = None,
                collect_locations: bool = False) -> list[DecoderLayerState]:
        """Run all layers; returns one state per layer (last one is final).

        Args:
            frame_levels: per frame, the encoded pyramid levels.
            box_predictor: callable (box_queries (T, N, C), references (T, N, 4))
                -> refined boxes (T, N, 4); shared with the output heads.
            frame_mask: optional (T,) bool, frames allowed into aggregation.
            collect_locations: record per-frame sampling points for diagnostics.
        """
        T = len(frame_levels)
        sample = frame_levels[0][0]
        dtype, device = sample.dtype, sample.device

        inst = self.query_content.weight.to(dtype=dtype, device=device)
        qpos = self.query_pos.weight.to(dtype=dtype, device=device)
        references = self.initial_references(T, dtype, device)
        box_queries = None
        states: list[DecoderLayerState] = []

        for layer in self.layers:
            q = layer.norm_sa(inst)[None]
            attn, _ = layer.self_attn(q + qpos[None], q + qpos[None], q,
                                      need_weights=False)
            inst = inst + layer.dropout(attn[0])

            queries_per_frame = box_queries if (self.decompose and box_queries is not None) \
                else inst[None].expand(T, -1, -1)

            new_box_queries = []
            locations = []
            for t in range(T):
                q_t = queries_per_frame[t]
                normed = layer.norm_ca(q_t)
                attn_out, locs = layer.cross_attn(
                    normed, references[t], frame_levels[t], return_locations=True)
                b_t = q_t + layer.dropout(attn_out)
                b_t = b_t + layer.ffn(layer.norm_ffn(b_t))
                new_box_queries.append(b_t)
                if collect_locations:
                    locations.append(locs.detach())
            box_queries = torch.stack(new_box_queries, dim=0)  # (T, N, C)

            inst, weights = layer.aggregator(box_queries, inst, frame_mask)

            boxes = box_predictor(self.norm_box(box_queries), references)
            states.append(DecoderLayerState(
                inst_queries=inst, box_queries=box_queries, references=references,
                boxes=boxes, frame_weights=weights, sampling_locations=locations))
            new_refs = boxes
            if not self.decompose:
                # without box queries there is no frame-specific anchor either:
                # the whole video shares one reference box per query, so the
                # sampling region is the same on every frame
                new_refs = boxes.mean(dim=0, keepdim=True).expand_as(boxes)
            references = new_refs.detach() if self.detach_references else new_refs

        return states

    def output_embeddings(self, state: DecoderLayerState):
        """Normalized (instance embedding, per-frame box queries) for the heads."""
        return self.norm_inst(state.inst_queries), self.norm_box(state.box_queries)


def export_attention_diagnostics(states: list[DecoderLayerState]) -> dict:
    """Serializable record of sampling points and frame-aggregation weights.

    Schema: ``num_layers``/``num_frames``/``num_queries`` plus
    ``sampling_points[layer][frame][query][head] -> [[x, y], ...]`` (one entry
    per level x point) and ``frame_weights[layer][frame][query] -> float``
    (summing to 1 over frames for each layer/query).
    """
    if not states:
        raise ValueError("no decoder states to export")
    if not states[0].sampling_locations:
        raise ValueError("decoder was run without collect_locations=True")
    T = states[0].frame_weights.shape[0]
    N = states[0].frame_weights.shape[1]
    record = {
        "num_layers": len(states),
        "num_frames": T,
        "num_queries": N,
        "sampling_points": [],
        "frame_weights": [],
    }
    for state in states:
        per_frame_pts = []
        for locs in state.sampling_locations:  # (N, heads, L, K, 2)
            pts = locs.reshape(N, locs.shape[1], -1, 2)
            per_frame_pts.append(pts.cpu().double().numpy().round(6).tolist())
        record["sampling_points"].append(per_frame_pts)
        record["frame_weights"].append(
            state.frame_weights.detach().cpu().double().numpy().round(9).tolist())
    return record
