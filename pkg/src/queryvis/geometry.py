"""Box conversions, (generalized) IoU, and bilinear map sampling.

Boxes are normalized to [0, 1] relative to the frame. The sampling grid
convention used everywhere in this package: the center of pixel (i, j) of an
H' x W' map sits at ((i + 0.5) / W', (j + 0.5) / H') in normalized coordinates.
"""

from __future__ import annotations

import torch


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    """Convert (..., 4) boxes from center/size to corner form."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h,
                        cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    """Convert (..., 4) boxes from corner to center/size form."""
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2,
                        x1 - x0, y1 - y0], dim=-1)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    """Area of (..., 4) corner-form boxes."""
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def generalized_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of corner-form boxes, broadcasting over leading dims.

    Returns values in [-1, 1]. Zero-area cases never raise: the IoU term is 0
    when the union has no area, and the enclosure term is dropped when the
    enclosing box has no area.
    """
    area_a = box_area(a)
    area_b = box_area(b)

    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny),
                      torch.zeros_like(union))

    lt_c = torch.min(a[..., :2], b[..., :2])
    rb_c = torch.max(a[..., 2:], b[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclosure = wh_c[..., 0] * wh_c[..., 1]
    correction = torch.where(
        enclosure > 0,
        (enclosure - union) / enclosure.clamp(min=torch.finfo(a.dtype).tiny),
        torch.zeros_like(enclosure))
    return iou - correction


def generalized_iou_pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(N, 4) x (M, 4) corner-form boxes -> (N, M) GIoU matrix."""
    return generalized_iou(a[:, None, :], b[None, :, :])


def box_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum of absolute coordinate differences over the 4 box components."""
    return (a - b).abs().sum(dim=-1)


def bilinear_sample(feature_map: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample a (C, H, W) map at continuous normalized points with zero padding.

    Args:
        feature_map: (C, H, W)
        points: (..., 2) normalized (x, y); values outside [0, 1] are allowed,
            out-of-bounds neighbors contribute zero.

    Returns:
        (..., C) interpolated values.
    """
    C, H, W = feature_map.shape
    out_shape = points.shape[:-1] + (C,)
    pts = points.reshape(-1, 2)

    x = pts[:, 0] * W - 0.5
    y = pts[:, 1] * H - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0

    flat = feature_map.reshape(C, -1)  # (C, H*W)
    out = feature_map.new_zeros(pts.shape[0], C)
    for dx, dy, weight in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0.long() + dx
        yi = y0.long() + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1))
        vals = flat[:, idx].t()  # (P, C)
        out = out + torch.where(valid, weight, torch.zeros_like(weight))[:, None] * vals
    return out.reshape(out_shape)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Logit of x with clamping, used for box refinement in logit space."""
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))
