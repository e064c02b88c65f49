"""Calibration run for the synthetic overfit benchmark: trains the desk-scale
model and reports training-set AP50 at checkpoints."""

import argparse
import json
import sys
import time
from pathlib import Path

import torch

from queryvis import vidgen, viseval
from queryvis.config import desk_config
from queryvis.inference import predict_video
from queryvis.train import TrainingData, build_criterion, build_model, build_optimizer


def evaluate_on_train(model, data_dir):
    dataset = vidgen.load_annotations(data_dir / "annotations.json")
    predictions = []
    model.eval()
    for video in dataset["videos"]:
        clip = vidgen.load_video_clip(dataset, video["id"], data_dir / "frames")
        predictions.extend(predict_video(model, clip,
                                         categories=dataset["categories"]))
    model.train()
    if not predictions:
        return viseval.EvalResult(0, 0, 0, 0, 0)
    return viseval.evaluate(predictions, dataset)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1200)
    ap.add_argument("--eval-every", type=int, default=200)
    ap.add_argument("--out", default="/tmp/qv_overfit")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--overrides", default="{}")
    args = ap.parse_args()

    cfg = desk_config()
    cfg.out_dir = args.out
    cfg.steps = args.steps
    cfg.seed = args.seed
    cfg.checkpoint_every = 0
    for key, value in json.loads(args.overrides).items():
        obj = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        setattr(obj, parts[-1], value)
    cfg.validate()

    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    criterion = build_criterion(cfg)
    optimizer, scheduler = build_optimizer(model, cfg)
    data = TrainingData(cfg, run_dir)
    data_dir = run_dir / "data_src0"

    import numpy as np
    t0 = time.time()
    model.train()
    for step in range(cfg.steps):
        rng = np.random.default_rng((cfg.seed + 1) * 1_000_003 + step)
        optimizer.zero_grad()
        batch_loss = None
        for _ in range(cfg.data.batch_size):
            frames, annotation = data.sample_clip(rng)
            outputs = model(frames)
            terms = criterion(outputs["layers"], outputs["mask_features"],
                              annotation, outputs["frame_size"])
            loss = terms["total"] / cfg.data.batch_size
            batch_loss = loss if batch_loss is None else batch_loss + loss
        batch_loss.backward()
        if cfg.optim.clip_max_norm > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.clip_max_norm)
        optimizer.step()
        scheduler.step()
        if step % 50 == 0:
            print(f"step {step} loss {float(batch_loss):.2f} "
                  f"({time.time() - t0:.0f}s)", flush=True)
        if (step + 1) % args.eval_every == 0 or step + 1 == cfg.steps:
            result = evaluate_on_train(model, data_dir)
            print(f"== step {step + 1}: AP50={result.ap50:.3f} AP={result.ap:.3f} "
                  f"AR10={result.ar10:.3f} per-cat={result.per_category} "
                  f"elapsed={time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
