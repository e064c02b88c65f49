"""Spatio-temporal IoU and AP/AR evaluation for mask sequences.

IoU accumulates intersections and unions over all frames of a sequence before
dividing, so both segmentation and tracking mistakes cost score. AP follows
the standard detection protocol: greedy matching of score-ranked predictions
per category and IoU threshold, 101-point interpolated precision, averaged
over thresholds 0.50:0.05:0.95 and over categories that have ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .maskops import rle_decode

IOU_THRESHOLDS = np.round(np.arange(0.50, 0.96, 0.05), 2)


def st_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Spatio-temporal IoU of two (T, H, W) mask sequences.

    Shorter sequences are padded with empty frames; absent frames are simply
    all-zero. Two entirely empty sequences agree perfectly (IoU 1).
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape[1:] != gt.shape[1:]:
        raise ValueError(f"resolution mismatch: {pred.shape[1:]} vs {gt.shape[1:]}")
    T = max(pred.shape[0], gt.shape[0])
    inter = 0
    union = 0
    for t in range(T):
        p = pred[t] if t < pred.shape[0] else np.zeros(pred.shape[1:], dtype=bool)
        g = gt[t] if t < gt.shape[0] else np.zeros(gt.shape[1:], dtype=bool)
        inter += int(np.logical_and(p, g).sum())
        union += int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return inter / union


@dataclass
class EvalResult:
    """AP/AR summary in [0, 1] (multiply by 100 for table-style numbers)."""

    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    per_category: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
                "AR1": self.ar1, "AR10": self.ar10,
                "per_category": self.per_category}


def format_table(result: EvalResult) -> str:
    """Fixed-width table with the benchmark's column names."""
    header = f"{'AP':>6} {'AP50':>6} {'AP75':>6} {'AR1':>6} {'AR10':>6}"
    row = " ".join(f"{100 * v:6.1f}" for v in
                   (result.ap, result.ap50, result.ap75, result.ar1, result.ar10))
    return header + "\n" + row


def _interpolated_ap(matched_flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP from ranked TP/FP flags."""
    if num_gt == 0 or not matched_flags:
        return 0.0
    tp = np.cumsum(matched_flags).astype(np.float64)
    fp = np.cumsum([not m for m in matched_flags]).astype(np.float64)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, sampled at 101 recall points
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    samples = np.linspace(0, 1, 101)
    idx = np.searchsorted(recall, samples, side="left")
    sampled = np.where(idx < len(precision),
                       precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _greedy_match(preds: list[dict], gts: list[dict], threshold: float,
                  iou_cache: dict) -> list[bool]:
    """Match score-ranked predictions to unmatched GT of the same video.

    Ties inside one prediction's candidate set go to the highest IoU, then the
    lowest GT id. Returns the TP flag per prediction, in ranking order.
    """
    taken: set[int] = set()
    flags = []
    for pred in preds:
        best_iou = 0.0
        best_gt = None
        for gt in gts:
            if gt["video_id"] != pred["video_id"] or gt["id"] in taken:
                continue
            key = (pred["uid"], gt["id"])
            if key not in iou_cache:
                iou_cache[key] = st_iou(pred["masks"], gt["masks"])
            iou = iou_cache[key]
            if iou < threshold:
                continue
            if iou > best_iou or (iou == best_iou and best_gt is not None
                                  and gt["id"] < best_gt["id"]):
                best_iou = iou
                best_gt = gt
        if best_gt is None:
            flags.append(False)
        else:
            taken.add(best_gt["id"])
            flags.append(True)
    return flags


def evaluate(predictions: list[dict], dataset: dict,
             max_dets: tuple[int, int] = (1, 10)) -> EvalResult:
    """Score predictions against a dataset.

    Args:
        predictions: list of ``{video_id, category_id, score,
            segmentations: [RLE|null per frame]}`` records.
        dataset: annotation dict in the vidgen schema.

    Returns:
        EvalResult with AP (mean over IoU thresholds and categories that have
        ground truth), AP50/AP75, and AR at 1 and 10 detections per video.
    """
    videos = {v["id"]: v for v in dataset["videos"]}
    known_categories = {c["id"] for c in dataset["categories"]}
    for pred in predictions:
        if pred["category_id"] not in known_categories:
            raise ValueError(f"unknown category id {pred['category_id']}")
        if pred["video_id"] not in videos:
            raise ValueError(f"unknown video id {pred['video_id']}")

    def decode_sequence(segs, video):
        masks = np.zeros((video["length"], video["height"], video["width"]),
                         dtype=bool)
        for t, seg in enumerate(segs):
            if seg is not None:
                masks[t] = rle_decode(seg)
        return masks

    gts = []
    for ann in dataset["annotations"]:
        video = videos[ann["video_id"]]
        gts.append({"id": ann["id"], "video_id": ann["video_id"],
                    "category_id": ann["category_id"],
                    "masks": decode_sequence(ann["segmentations"], video)})

    ranked = []
    for pred in predictions:
        video = videos[pred["video_id"]]
        ranked.append({
            "video_id": pred["video_id"],
            "category_id": pred["category_id"],
            "score": float(pred["score"]),
            "masks": decode_sequence(pred["segmentations"], video),
            # content-based tie-break keeps evaluation order-invariant
            "tiebreak": json.dumps(pred["segmentations"], sort_keys=True),
        })
    ranked.sort(key=lambda p: (-p["score"], p["video_id"], p["category_id"],
                               p["tiebreak"]))
    for uid, pred in enumerate(ranked):
        pred["uid"] = uid

    categories = sorted({g["category_id"] for g in gts})
    if not categories:
        raise ValueError("dataset has no annotated instances to evaluate against")

    iou_cache: dict = {}
    ap_per_threshold = {thr: [] for thr in IOU_THRESHOLDS}
    recall_k = {k: {thr: [] for thr in IOU_THRESHOLDS} for k in max_dets}
    per_category = {}

    for cat in categories:
        cat_preds = [p for p in ranked if p["category_id"] == cat]
        cat_gts = [g for g in gts if g["category_id"] == cat]
        cat_aps = []
        for thr in IOU_THRESHOLDS:
            flags = _greedy_match(cat_preds, cat_gts, thr, iou_cache)
            ap = _interpolated_ap(flags, len(cat_gts))
            ap_per_threshold[thr].append(ap)
            cat_aps.append(ap)
            for k in max_dets:
                top = []
                per_video_count: dict[int, int] = {}
                for p in cat_preds:
                    c = per_video_count.get(p["video_id"], 0)
                    if c < k:
                        top.append(p)
                        per_video_count[p["video_id"]] = c + 1
                matched = sum(_greedy_match(top, cat_gts, thr, iou_cache))
                recall_k[k][thr].append(matched / len(cat_gts))
        name = next(c["name"] for c in dataset["categories"] if c["id"] == cat)
        per_category[name] = float(np.mean(cat_aps))

    all_aps = [v for thr in IOU_THRESHOLDS for v in ap_per_threshold[thr]]
    ar = {k: float(np.mean([v for thr in IOU_THRESHOLDS for v in recall_k[k][thr]]))
          for k in max_dets}
    return EvalResult(
        ap=float(np.mean(all_aps)),
        ap50=float(np.mean(ap_per_threshold[IOU_THRESHOLDS[0]])),
        ap75=float(np.mean(ap_per_threshold[np.round(0.75, 2)])),
        ar1=ar[max_dets[0]],
        ar10=ar[max_dets[1]],
        per_category=per_category,
    )
