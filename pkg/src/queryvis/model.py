"""Full video instance segmentation model: encoder, query-decompose decoder,
and shared output heads applied after every decoder layer."""

from __future__ import annotations

import torch
from torch import nn

from .decoder import QueryDecoder, export_attention_diagnostics
from .encoder import VideoFeatureEncoder
from .heads import (BoxHead, ClassHead, MaskBranch, MaskController,
                    apply_mask_heads)
from .structures import PredictionSet


class VideoInstanceModel(nn.Module):
    """One clip in, per-layer prediction sets out.

    All output heads are single shared modules: the same class head, box head
    and controller produce both the auxiliary per-layer outputs and the final
    prediction.
    """

    def __init__(self, num_classes: int, dim: int = 64, num_heads: int = 8,
                 num_points: int = 4, strides: tuple[int, ...] = (4, 8),
                 backbone_channels: int = 16, enc_layers: int = 2,
                 dec_layers: int = 2, num_queries: int = 20,
                 ffn_dim: int | None = None, aggregation: str = "weighted",
                 decompose: bool = True, flatten: bool = False,
                 flatten_frames: int | None = None, dropout: float = 0.0,
                 detach_references: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.encoder = VideoFeatureEncoder(
            dim=dim, num_layers=enc_layers, num_heads=num_heads,
            num_points=num_points, ffn_dim=ffn_dim, strides=strides,
            backbone_channels=backbone_channels, dropout=dropout,
            flatten=flatten, flatten_frames=flatten_frames)
        num_levels = len(strides) * (flatten_frames if flatten else 1)
        self.decoder = QueryDecoder(
            dim=dim, num_layers=dec_layers, num_queries=num_queries,
            num_heads=num_heads, num_levels=num_levels, num_points=num_points,
            ffn_dim=ffn_dim, aggregation=aggregation, decompose=decompose,
            dropout=dropout, detach_references=detach_references)
        self.flatten = flatten

        self.class_head = ClassHead(dim, num_classes)
        self.box_embed = nn.Linear(dim, dim)
        self.box_head = BoxHead(dim)
        self.controller = MaskController(dim)
        self.mask_branch = MaskBranch(dim, strides)

    def _predict_boxes(self, box_queries: torch.Tensor,
                       references: torch.Tensor) -> torch.Tensor:
        return self.box_head(self.box_embed(box_queries), references)

    def forward(self, frames: torch.Tensor, frame_mask: torch.Tensor | None = None,
                collect_diagnostics: bool = False, with_masks: bool = True) -> dict:
        """Args:
            frames: (T, 3, H, W) clip tensor.
            frame_mask: optional (T,) bool; frames allowed into the temporal
                aggregation (fewer-frames inference ablation). Masks are still
                predicted on every frame.
            collect_diagnostics: record sampling points / frame weights.
            with_masks: run the mask branch (skippable for box-only probes).

        Returns dict with ``layers`` (per decoder layer: class_logits, boxes,
        mask_params), ``mask_features``, ``frame_size`` and optionally
        ``diagnostics``.
        """
        T = frames.shape[0]
        frame_size = (frames.shape[-2], frames.shape[-1])
        if self.flatten and T != self.encoder.flatten_frames:
            raise ValueError("flatten ablation requires the configured clip length")

        encoded = self.encoder(frames)
        if self.flatten:
            # every frame's queries attend over all frames' levels concatenated
            shared = [lvl for pyramid in encoded for lvl in pyramid]
            decoder_levels = [shared] * T
        else:
            decoder_levels = encoded
        states = self.decoder(decoder_levels, self._predict_boxes,
                              frame_mask=frame_mask,
                              collect_locations=collect_diagnostics)

        layer_outputs = []
        for state in states:
            inst, _ = self.decoder.output_embeddings(state)
            layer_outputs.append({
                "class_logits": self.class_head(inst),
                "boxes": state.boxes,
                "mask_params": self.controller(inst),
            })

        mask_features = self.mask_branch(encoded, frame_size) if with_masks else None
        out = {
            "layers": layer_outputs,
            "mask_features": mask_features,
            "frame_size": frame_size,
        }
        if collect_diagnostics:
            out["diagnostics"] = export_attention_diagnostics(states)
        return out

    @torch.no_grad()
    def predict(self, frames: torch.Tensor, frame_mask: torch.Tensor | None = None,
                mask_queries: torch.Tensor | None = None) -> PredictionSet:
        """Inference: final-layer prediction set with mask logits.

        Masks are evaluated for ``mask_queries`` only (default: all queries);
        postprocessing passes the surviving query indices to keep the dynamic
        heads cheap.
        """
        out = self.forward(frames, frame_mask=frame_mask)
        final = out["layers"][-1]
        probs = final["class_logits"].softmax(-1)
        boxes = final["boxes"]
        N = probs.shape[0]
        if mask_queries is None:
            mask_queries = torch.arange(N, device=frames.device)
        logits_sel = apply_mask_heads(
            out["mask_features"], boxes[:, mask_queries, :2],
            final["mask_params"][mask_queries])
        T, _, h, w = out["mask_features"].shape
        mask_logits = logits_sel.new_full((T, N, h, w), -20.0)
        mask_logits[:, mask_queries] = logits_sel
        return PredictionSet(class_probs=probs, boxes=boxes, mask_logits=mask_logits)
