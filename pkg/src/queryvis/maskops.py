"""Mask run-length coding, resizing, and the two segmentation loss terms."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def rle_encode(mask: np.ndarray) -> dict:
    """Encode a binary 2D mask as column-major run lengths.

    The counts list alternates zero-run / one-run and always starts with the
    zero-run (possibly of length 0). Output shape:
    ``{"size": [H, W], "counts": [ints]}``.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {mask.shape}")
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise ValueError("rle_encode requires a binary mask")
    flat = mask.astype(np.uint8).ravel(order="F")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    """Exact inverse of :func:`rle_encode`; returns a bool (H, W) array."""
    h, w = (int(v) for v in rle["size"])
    counts = list(rle["counts"])
    if any(c < 0 for c in counts):
        raise ValueError("run lengths must be non-negative")
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"run lengths sum to {total}, expected {h}x{w}={h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        flat[pos:pos + count] = value
        pos += count
        value = not value
    return flat.reshape((h, w), order="F")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Dice loss between a probability mask and a binary mask, in [0, 1]."""
    if pred.shape != gt.shape:
        raise ValueError(f"resolution mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def focal_loss(pred_logits: torch.Tensor, gt: torch.Tensor,
               alpha: float | None = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Pixel-wise sigmoid focal loss, averaged over pixels.

    ``alpha=None`` disables class weighting; with ``gamma=0`` that reduces to
    mean binary cross-entropy.
    """
    if pred_logits.shape != gt.shape:
        raise ValueError(
            f"resolution mismatch: {tuple(pred_logits.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred_logits.dtype)
    ce = F.binary_cross_entropy_with_logits(pred_logits, gt, reduction="none")
    prob = pred_logits.sigmoid()
    p_t = prob * gt + (1 - prob) * (1 - gt)
    loss = ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = (alpha * gt + (1 - alpha) * (1 - gt)) * loss
    return loss.mean()


def resize_mask(mask: torch.Tensor, size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize (..., H, W) masks: bilinear for probabilities, nearest for binary."""
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError("target resolution must be positive")
    if mask.shape[-2:] == (h, w):
        return mask
    lead = mask.shape[:-2]
    x = mask.reshape(1, -1, *mask.shape[-2:])
    if mode == "bilinear":
        out = F.interpolate(x.float() if not x.is_floating_point() else x,
                            size=(h, w), mode="bilinear", align_corners=False)
    elif mode == "nearest":
        out = F.interpolate(x.float() if not x.is_floating_point() else x,
                            size=(h, w), mode="nearest-exact").to(mask.dtype)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return out.reshape(*lead, h, w)
