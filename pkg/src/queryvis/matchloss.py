"""Bipartite sequence matching and the Hungarian training loss.

Matching compares class probability and box sequences only (mask comparison
is deliberately left out of the cost); the loss then adds Dice+Focal mask
terms for the matched pairs. Box and mask terms are computed per frame and
averaged over the frames where the ground-truth instance is present.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from . import maskops
from .geometry import box_cxcywh_to_xyxy, generalized_iou, generalized_iou_pairwise
from .heads import apply_mask_heads
from .structures import VideoAnnotation

BRUTE_FORCE_MAX_GT = 8
BRUTE_FORCE_MAX_INJECTIONS = 2_000_000


@dataclass
class Assignment:
    """Injective ground-truth -> prediction map with its total cost."""

    gt_indices: np.ndarray
    pred_indices: np.ndarray
    total_cost: float

    def __post_init__(self):
        if len(set(self.pred_indices.tolist())) != len(self.pred_indices):
            raise ValueError("assignment must be injective")

    def as_dict(self) -> dict[int, int]:
        return {int(g): int(p) for g, p in zip(self.gt_indices, self.pred_indices)}


def matching_cost(class_probs: torch.Tensor, boxes: torch.Tensor,
                  annotation: VideoAnnotation,
                  l1_weight: float = 5.0, giou_weight: float = 2.0) -> torch.Tensor:
    """Pairwise cost matrix (num_gt, N): -p(class) + frame-averaged box terms.

    The class term uses the raw probability (not its log); box terms average
    only over frames where the instance is annotated. No mask term.
    """
    T, N, _ = boxes.shape
    G = annotation.num_instances
    if G == 0:
        return boxes.new_zeros((0, N))

    cost_class = -class_probs[:, annotation.labels].t()  # (G, N)

    gt_boxes = annotation.boxes.to(boxes.dtype)
    pred_corners = box_cxcywh_to_xyxy(boxes)  # (T, N, 4)
    gt_corners = box_cxcywh_to_xyxy(gt_boxes)  # (T, G, 4)
    present = annotation.present.to(boxes.dtype)  # (T, G)

    box_terms = boxes.new_zeros(G, N)
    for t in range(T):
        l1 = torch.cdist(gt_boxes[t], boxes[t], p=1)  # (G, N)
        giou = generalized_iou_pairwise(gt_corners[t], pred_corners[t])
        box_terms = box_terms + present[t][:, None] * (
            l1_weight * l1 + giou_weight * (1 - giou))
    box_terms = box_terms / annotation.present.sum(dim=0)[:, None].to(boxes.dtype)

    return cost_class + box_terms


def hungarian_assign(cost: torch.Tensor | np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of rows (GT) to columns (predictions)."""
    cost_np = cost.detach().cpu().double().numpy() if torch.is_tensor(cost) \
        else np.asarray(cost, dtype=np.float64)
    G, N = cost_np.shape
    if G > N:
        raise ValueError(f"more ground-truth instances ({G}) than predictions ({N})")
    if not np.isfinite(cost_np).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost_np)
    return Assignment(gt_indices=rows, pred_indices=cols,
                      total_cost=float(cost_np[rows, cols].sum()))


def brute_force_assign(cost: torch.Tensor | np.ndarray) -> Assignment:
    """Exhaustive assignment oracle; first minimum in lexicographic order wins
    (i.e. ties go to the lowest prediction indices)."""
    cost_np = cost.detach().cpu().double().numpy() if torch.is_tensor(cost) \
        else np.asarray(cost, dtype=np.float64)
    G, N = cost_np.shape
    if G > N:
        raise ValueError(f"more ground-truth instances ({G}) than predictions ({N})")
    if G > BRUTE_FORCE_MAX_GT:
        raise ValueError(f"size guard exceeded: num_gt {G} > {BRUTE_FORCE_MAX_GT}")
    total = 1
    for i in range(G):
        total *= N - i
    if total > BRUTE_FORCE_MAX_INJECTIONS:
        raise ValueError(f"size guard exceeded: {total} injections")
    if G == 0:
        return Assignment(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0.0)

    perms = np.array(list(itertools.permutations(range(N), G)), dtype=int)
    totals = cost_np[np.arange(G)[None, :], perms].sum(axis=1)
    best = int(np.argmin(totals))
    return Assignment(gt_indices=np.arange(G), pred_indices=perms[best],
                      total_cost=float(totals[best]))


@dataclass
class LossWeights:
    class_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    focal_weight: float = 2.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1


def hungarian_loss(layer_outputs: list[dict], mask_features: torch.Tensor | None,
                   annotation: VideoAnnotation, assignments: list[Assignment],
                   frame_size: tuple[int, int],
                   weights: LossWeights | None = None) -> dict[str, torch.Tensor]:
    """Sum the matched-pair losses over all decoder layers.

    Args:
        layer_outputs: per decoder layer, dict with ``class_logits`` (N, K+1),
            ``boxes`` (T, N, 4) and ``mask_params`` (N, 169).
        mask_features: (T, 8, h, w) shared mask-branch output, or None to skip
            mask terms entirely.
        assignments: one per layer (auxiliary supervision re-matches per layer).
        frame_size: (H, W) of the input frames; losses compare masks at 1/4.

    Returns:
        breakdown dict with per-term totals and ``total``.
    """
    w = weights or LossWeights()
    if len(assignments) != len(layer_outputs):
        raise ValueError("need one assignment per decoder layer")
    G = annotation.num_instances
    device_src = layer_outputs[0]["class_logits"]
    terms = {k: device_src.new_zeros(()) for k in
             ("class", "l1", "giou", "focal", "dice")}

    quarter = (frame_size[0] // 4, frame_size[1] // 4)
    gt_masks_quarter = None

    for out, assign in zip(layer_outputs, assignments):
        logits = out["class_logits"]  # (N, K+1)
        boxes = out["boxes"]          # (T, N, 4)
        N = logits.shape[0]
        num_classes = logits.shape[1] - 1
        if len(assign.gt_indices) and (assign.gt_indices.max() >= G):
            raise ValueError("assignment references a ground-truth index that does not exist")

        targets = torch.full((N,), num_classes, dtype=torch.long, device=logits.device)
        class_weights = torch.ones(num_classes + 1, dtype=logits.dtype,
                                   device=logits.device)
        class_weights[num_classes] = w.no_object_weight
        if G:
            gt_idx = torch.as_tensor(assign.gt_indices, device=logits.device)
            pred_idx = torch.as_tensor(assign.pred_indices, device=logits.device)
            targets[pred_idx] = annotation.labels[gt_idx]
        terms["class"] = terms["class"] + w.class_weight * F.cross_entropy(
            logits, targets, weight=class_weights, reduction="sum")

        if G == 0:
            continue

        matched_boxes = boxes[:, pred_idx]          # (T, g, 4)
        gt_boxes = annotation.boxes[:, gt_idx].to(boxes.dtype)  # (T, g, 4)
        present = annotation.present[:, gt_idx]     # (T, g)
        frame_counts = present.sum(dim=0).to(boxes.dtype)  # (g,)

        l1 = (matched_boxes - gt_boxes).abs().sum(-1)  # (T, g)
        giou = generalized_iou(box_cxcywh_to_xyxy(gt_boxes),
                               box_cxcywh_to_xyxy(matched_boxes))  # (T, g)
        present_f = present.to(boxes.dtype)
        terms["l1"] = terms["l1"] + w.l1_weight * (
            (l1 * present_f).sum(0) / frame_counts).sum()
        terms["giou"] = terms["giou"] + w.giou_weight * (
            ((1 - giou) * present_f).sum(0) / frame_counts).sum()

        if mask_features is not None:
            if gt_masks_quarter is None:
                gt_masks_quarter = maskops.resize_mask(
                    annotation.masks.to(boxes.dtype), quarter, mode="nearest")
            pred_logits = apply_mask_heads(
                mask_features, matched_boxes[..., :2], out["mask_params"][pred_idx])
            pred_logits = maskops.resize_mask(pred_logits, quarter, mode="bilinear")
            gt_q = gt_masks_quarter[:, gt_idx]  # (T, g, H/4, W/4)
            for j in range(len(gt_idx)):
                frames = torch.nonzero(present[:, j]).flatten().tolist()
                focal = sum(maskops.focal_loss(pred_logits[t, j], gt_q[t, j])
                            for t in frames) / len(frames)
                dice = sum(maskops.dice_loss(pred_logits[t, j].sigmoid(), gt_q[t, j])
                           for t in frames) / len(frames)
                terms["focal"] = terms["focal"] + w.focal_weight * focal
                terms["dice"] = terms["dice"] + w.dice_weight * dice

    terms["total"] = sum(terms.values())
    return terms


class SequenceCriterion(nn.Module):
    """Match per decoder layer, then accumulate the Hungarian loss."""

    def __init__(self, weights: LossWeights | None = None):
        super().__init__()
        self.weights = weights or LossWeights()

    def match(self, layer_outputs: list[dict],
              annotation: VideoAnnotation) -> list[Assignment]:
        assignments = []
        with torch.no_grad():
            for out in layer_outputs:
                probs = out["class_logits"].softmax(-1)
                cost = matching_cost(probs, out["boxes"], annotation,
                                     l1_weight=self.weights.l1_weight,
                                     giou_weight=self.weights.giou_weight)
                assignments.append(hungarian_assign(cost))
        return assignments

    def forward(self, layer_outputs: list[dict], mask_features: torch.Tensor | None,
                annotation: VideoAnnotation,
                frame_size: tuple[int, int]) -> dict[str, torch.Tensor]:
        assignments = self.match(layer_outputs, annotation)
        return hungarian_loss(layer_outputs, mask_features, annotation,
                              assignments, frame_size, self.weights)
