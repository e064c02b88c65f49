"""Whole-video inference and attention diagnostics export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import vidgen
from .heads import postprocess
from .maskops import rle_encode
from .model import VideoInstanceModel
from .structures import VideoClip
from .train import load_model


def evenly_sampled_frame_mask(num_frames: int, k: int) -> torch.Tensor:
    """(T,) bool mask selecting k evenly spaced frames (k >= T keeps all)."""
    if k < 1:
        raise ValueError("need at least one frame")
    mask = torch.zeros(num_frames, dtype=torch.bool)
    idx = np.unique(np.linspace(0, num_frames - 1, min(k, num_frames)).round().astype(int))
    mask[torch.as_tensor(idx)] = True
    return mask


def predict_video(model: VideoInstanceModel, clip: VideoClip,
                  mask_frames: int | None = None, top_k: int = 10,
                  score_threshold: float = 0.05,
                  categories=vidgen.DEFAULT_CATEGORIES) -> list[dict]:
    """Run one whole video through the model and serialize ranked instances.

    ``mask_frames`` restricts the temporal aggregation (hence the generated
    mask heads) to k evenly sampled frames; masks are still predicted on every
    frame of the video.
    """
    model.eval()
    frames = clip.to_tensor()
    frame_mask = None
    if mask_frames is not None:
        frame_mask = evenly_sampled_frame_mask(frames.shape[0], mask_frames)
    prediction = model.predict(frames, frame_mask=frame_mask)
    results = postprocess(prediction, clip.frame_size, top_k=top_k,
                          score_threshold=score_threshold)
    records = []
    for res in results:
        segs = [rle_encode(res.masks[t].cpu().numpy()) for t in range(clip.num_frames)]
        records.append({
            "video_id": clip.video_id,
            "category_id": categories[res.label]["id"],
            "score": res.score,
            "segmentations": segs,
        })
    return records


def load_input_videos(input_path: str | Path) -> tuple[list[VideoClip], list[dict]]:
    """Accept either an annotations JSON (with its frames dir alongside) or a
    directory of image frames forming a single video."""
    input_path = Path(input_path)
    if input_path.is_dir():
        names = sorted(p.name for p in input_path.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not names:
            raise ValueError(f"no image frames found in {input_path}")
        from PIL import Image
        frames = np.stack([
            np.asarray(Image.open(input_path / n).convert("RGB")) for n in names])
        return [VideoClip(frames=frames, video_id=0, file_names=names)], \
            vidgen.DEFAULT_CATEGORIES
    dataset = vidgen.load_annotations(input_path)
    frames_dir = input_path.parent / "frames"
    clips = [vidgen.load_video_clip(dataset, v["id"], frames_dir)
             for v in dataset["videos"]]
    return clips, dataset["categories"]


def run_inference(checkpoint: str | Path, input_path: str | Path,
                  mask_frames: int | None = None,
                  output: str | Path | None = None) -> list[dict]:
    model, _ = load_model(checkpoint)
    clips, categories = load_input_videos(input_path)
    predictions = []
    for clip in clips:
        predictions.extend(predict_video(model, clip, mask_frames=mask_frames,
                                         categories=categories))
    if output is not None:
        Path(output).write_text(json.dumps(predictions))
    return predictions


def run_diagnostics(checkpoint: str | Path, video_id: int,
                    annotations: str | Path, out_dir: str | Path,
                    max_queries: int = 3) -> dict:
    """Export sampling points and frame weights for one video.

    Writes ``diagnostics.json`` plus per-layer sampling-point overlays and a
    frame-weight bar chart for the most confident queries.
    """
    model, _ = load_model(checkpoint)
    annotations = Path(annotations)
    dataset = vidgen.load_annotations(annotations)
    clip = vidgen.load_video_clip(dataset, video_id, annotations.parent / "frames")

    with torch.no_grad():
        out = model(clip.to_tensor(), collect_diagnostics=True)
    record = out["diagnostics"]
    scores = out["layers"][-1]["class_logits"].softmax(-1)[:, :-1].max(-1).values
    record["video_id"] = video_id
    record["query_scores"] = scores.tolist()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "diagnostics.json").write_text(json.dumps(record))

    top = scores.argsort(descending=True)[:max_queries].tolist()
    colors = plt.cm.tab10(np.linspace(0, 1, 10))
    T = record["num_frames"]
    for layer in range(record["num_layers"]):
        fig, axes = plt.subplots(1, T, figsize=(3 * T, 3), squeeze=False)
        for t in range(T):
            ax = axes[0][t]
            ax.imshow(clip.frames[t])
            h, w = clip.frame_size
            for rank, q in enumerate(top):
                pts = np.asarray(record["sampling_points"][layer][t][q])
                pts = pts.reshape(-1, 2)
                ax.scatter(pts[:, 0] * w, pts[:, 1] * h, s=6,
                           color=colors[rank % 10], label=f"query {q}" if t == 0 else None)
            ax.set_xlim(0, w)
            ax.set_ylim(h, 0)
            ax.set_title(f"layer {layer + 1}, frame {t + 1}", fontsize=8)
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(out_dir / f"sampling_points_layer{layer + 1}.png", dpi=110)
        plt.close(fig)

    fig, axes = plt.subplots(1, record["num_layers"],
                             figsize=(3 * record["num_layers"], 3), squeeze=False)
    weights = np.asarray(record["frame_weights"])  # (layers, T, N)
    for layer in range(record["num_layers"]):
        ax = axes[0][layer]
        width = 0.8 / max(len(top), 1)
        for rank, q in enumerate(top):
            ax.bar(np.arange(T) + rank * width, weights[layer, :, q], width=width,
                   color=colors[rank % 10], label=f"query {q}" if layer == 0 else None)
        ax.set_title(f"layer {layer + 1}", fontsize=8)
        ax.set_xlabel("frame")
        ax.set_ylim(0, 1)
    if len(top):
        fig.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "frame_weights.png", dpi=110)
    plt.close(fig)
    return record
