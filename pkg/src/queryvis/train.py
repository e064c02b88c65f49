"""Training: deterministic clip sampling, AdamW with per-group learning rates,
checkpointing, and structured loss logging."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import torch
import yaml

from . import vidgen
from .config import RunConfig
from .matchloss import LossWeights, SequenceCriterion
from .model import VideoInstanceModel
from .structures import VideoAnnotation

log = logging.getLogger(__name__)


def build_model(cfg: RunConfig) -> VideoInstanceModel:
    m = cfg.model
    return VideoInstanceModel(
        num_classes=m.num_classes, dim=m.dim, num_heads=m.num_heads,
        num_points=m.num_points, strides=tuple(m.strides),
        backbone_channels=m.backbone_channels, enc_layers=m.enc_layers,
        dec_layers=m.dec_layers, num_queries=m.num_queries, ffn_dim=m.ffn_dim,
        aggregation=m.aggregation, decompose=m.decompose, flatten=m.flatten,
        flatten_frames=cfg.data.train_frames if m.flatten else None,
        dropout=m.dropout, detach_references=m.detach_references)


def build_criterion(cfg: RunConfig) -> SequenceCriterion:
    l = cfg.loss
    return SequenceCriterion(LossWeights(
        class_weight=l.class_weight, l1_weight=l.l1_weight,
        giou_weight=l.giou_weight, focal_weight=l.focal_weight,
        dice_weight=l.dice_weight, no_object_weight=l.no_object_weight))


def build_optimizer(model: VideoInstanceModel, cfg: RunConfig):
    """AdamW with reduced learning rates for the backbone and the
    deformable-attention offset projections."""
    opt = cfg.optim
    backbone, offsets, rest = [], [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if name.startswith("encoder.backbone."):
            backbone.append(param)
        elif "sampling_offsets" in name:
            offsets.append(param)
        else:
            rest.append(param)
    groups = [
        {"params": rest, "lr": opt.lr},
        {"params": backbone, "lr": opt.lr * opt.backbone_lr_factor},
        {"params": offsets, "lr": opt.lr * opt.offset_lr_factor},
    ]
    optimizer = torch.optim.AdamW(groups, lr=opt.lr, betas=tuple(opt.betas),
                                  weight_decay=opt.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(opt.lr_drop_steps), gamma=opt.lr_drop_factor)
    return optimizer, scheduler


class TrainingData:
    """Weighted mixture of dataset sources with deterministic clip sampling.

    Frames are cached in memory (desk-scale datasets); synthetic sources are
    generated under the run directory the first time they are used.
    """

    def __init__(self, cfg: RunConfig, run_dir: Path):
        self.train_frames = cfg.data.train_frames
        self.sources = []
        weights = []
        for i, src in enumerate(cfg.data.sources):
            if src.synthetic is not None:
                s = src.synthetic
                data_dir = run_dir / f"data_src{i}"
                ann_path = data_dir / "annotations.json"
                if not ann_path.exists():
                    vidgen.build_synthetic_dataset(
                        data_dir, num_videos=s.num_videos, seed=s.seed,
                        width=s.width, height=s.height, num_frames=s.num_frames,
                        num_objects=(s.min_objects, s.max_objects),
                        size_range=(s.size_min, s.size_max),
                        speed_range=(s.speed_min, s.speed_max),
                        exit_probability=s.exit_probability)
                dataset = vidgen.load_annotations(ann_path)
                frames_dir = data_dir / "frames"
            else:
                ann_path = RunConfig.resolve_data_path(src.annotations)
                dataset = vidgen.load_annotations(ann_path)
                frames_dir = RunConfig.resolve_data_path(
                    src.frames_dir or str(Path(ann_path).parent / "frames"))
            clips = {}
            annotations = {}
            for video in dataset["videos"]:
                vid = video["id"]
                clips[vid] = vidgen.load_video_clip(dataset, vid, frames_dir)
                annotations[vid] = vidgen.dataset_annotation(dataset, vid)
            self.sources.append({
                "dataset": dataset,
                "clips": clips,
                "annotations": annotations,
                "video_ids": [v["id"] for v in dataset["videos"]],
                "pseudo_frames": src.pseudo_video_frames,
                "pseudo_rotation": src.pseudo_video_max_rotation,
            })
            weights.append(src.weight)
        total = sum(weights)
        self.weights = [w / total for w in weights]

    @staticmethod
    def slice_window(annotation: VideoAnnotation, start: int, length: int):
        """Restrict an annotation to frames [start, start+length); instances
        absent on every kept frame are dropped."""
        present = annotation.present[start:start + length]
        keep = torch.nonzero(present.any(dim=0)).flatten()
        return VideoAnnotation(
            labels=annotation.labels[keep],
            boxes=annotation.boxes[start:start + length][:, keep],
            masks=annotation.masks[start:start + length][:, keep],
            present=present[:, keep],
        )

    def sample_clip(self, rng: np.random.Generator):
        src = self.sources[int(rng.choice(len(self.sources), p=self.weights))]
        vid = src["video_ids"][int(rng.integers(len(src["video_ids"])))]
        clip = src["clips"][vid]
        annotation = src["annotations"][vid]
        if src["pseudo_frames"] and clip.num_frames == 1:
            clip, annotation = vidgen.pseudo_video(
                clip.frames[0], annotation.masks[0].numpy(),
                annotation.labels.tolist(), src["pseudo_frames"],
                max_rotation_deg=src["pseudo_rotation"], rng=rng)
        T = clip.num_frames
        length = min(self.train_frames, T)
        start = int(rng.integers(0, T - length + 1))
        frames = clip.to_tensor()[start:start + length]
        window = self.slice_window(annotation, start, length)
        if window.num_instances == 0:
            # degenerate window (everything absent): fall back to full clip
            frames = clip.to_tensor()
            window = annotation
        return frames, window


def save_checkpoint(path: Path, model, optimizer, scheduler, step: int,
                    cfg: RunConfig) -> None:
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "step": step,
        "config": cfg.to_dict(),
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path: str | Path):
    """Returns (config, payload); raises if the file is not a run checkpoint."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ValueError(f"{path} is not a loadable checkpoint: {e}") from e
    if not isinstance(payload, dict) or "model" not in payload or "config" not in payload:
        raise ValueError(f"{path} is not a queryvis checkpoint")
    cfg = RunConfig.from_dict(payload["config"])
    return cfg, payload


def load_model(path: str | Path) -> tuple[VideoInstanceModel, RunConfig]:
    cfg, payload = load_checkpoint(path)
    model = build_model(cfg)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise ValueError(f"checkpoint incompatible with its config: {e}") from e
    model.eval()
    return model, cfg


def train(cfg: RunConfig, resume: str | Path | None = None) -> dict:
    """Run the optimization loop; returns summary paths and the loss history."""
    cfg.validate()
    run_dir = cfg.resolved_out_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(cfg.to_dict(), f)

    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    criterion = build_criterion(cfg)
    optimizer, scheduler = build_optimizer(model, cfg)
    start_step = 0
    if resume is not None:
        _, payload = load_checkpoint(resume)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        torch.set_rng_state(payload["torch_rng"])
        start_step = payload["step"]

    data = TrainingData(cfg, run_dir)
    model.train()
    history = []
    log_path = run_dir / "train_log.jsonl"
    log_file = open(log_path, "a")

    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng((cfg.seed + 1) * 1_000_003 + step)
        optimizer.zero_grad()
        breakdown_sum: dict[str, float] = {}
        batch_loss = None
        for _ in range(cfg.data.batch_size):
            frames, annotation = data.sample_clip(rng)
            outputs = model(frames)
            terms = criterion(outputs["layers"], outputs["mask_features"],
                              annotation, outputs["frame_size"])
            loss = terms["total"] / cfg.data.batch_size
            batch_loss = loss if batch_loss is None else batch_loss + loss
            for key, value in terms.items():
                breakdown_sum[key] = breakdown_sum.get(key, 0.0) \
                    + float(value.detach()) / cfg.data.batch_size
        batch_loss.backward()
        if cfg.optim.clip_max_norm > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.clip_max_norm)
        optimizer.step()
        scheduler.step()

        record = {"step": step, "lr": scheduler.get_last_lr()[0], **breakdown_sum}
        history.append(record)
        log_file.write(json.dumps(record) + "\n")
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("step %d: %s", step,
                     " ".join(f"{k}={v:.4f}" for k, v in breakdown_sum.items()))
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                and step + 1 < cfg.steps:
            save_checkpoint(run_dir / f"checkpoint_{step + 1:06d}.pt",
                            model, optimizer, scheduler, step + 1, cfg)

    log_file.close()
    final_path = run_dir / "checkpoint_final.pt"
    save_checkpoint(final_path, model, optimizer, scheduler, cfg.steps, cfg)
    return {"checkpoint": final_path, "log": log_path, "history": history,
            "run_dir": run_dir}
