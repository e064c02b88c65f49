"""Calibration for the ablation trend checks: trains each arm on the pinned
ablation benchmark and prints the AP50 ordering."""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from queryvis import vidgen, viseval
from queryvis.config import ablation_benchmark_config
from queryvis.inference import predict_video
from queryvis.train import TrainingData, build_criterion, build_model, build_optimizer

ARMS = {
    "base": {},
    "decompose_off": {"model.decompose": False},
    "flatten": {"model.flatten": True},
    "sum": {"model.aggregation": "sum"},
    "average": {"model.aggregation": "average"},
}


def train_arm(name, overrides, steps=None, seed=None, out_root="/tmp/qv_ablate"):
    cfg = ablation_benchmark_config(**overrides)
    if steps:
        cfg.steps = steps
    if seed is not None:
        cfg.seed = seed
    cfg.out_dir = f"{out_root}/{name}_s{cfg.seed}"
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    criterion = build_criterion(cfg)
    optimizer, scheduler = build_optimizer(model, cfg)
    data = TrainingData(cfg, run_dir)

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
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.clip_max_norm)
        optimizer.step()
        scheduler.step()

    model.eval()
    data_dir = run_dir / "data_src0"
    dataset = vidgen.load_annotations(data_dir / "annotations.json")
    predictions = []
    for video in dataset["videos"]:
        clip = vidgen.load_video_clip(dataset, video["id"], data_dir / "frames")
        predictions.extend(predict_video(model, clip,
                                         categories=dataset["categories"]))
    result = viseval.evaluate(predictions, dataset) if predictions \
        else viseval.EvalResult(0, 0, 0, 0, 0)
    print(f"[{name} seed={cfg.seed}] AP50={result.ap50:.3f} AP={result.ap:.3f} "
          f"({time.time() - t0:.0f}s)", flush=True)
    return result.ap50


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--arms", default=",".join(ARMS))
    ap.add_argument("--out-root", default="/tmp/qv_ablate")
    args = ap.parse_args()

    scores = {}
    for name in args.arms.split(","):
        scores[name] = train_arm(name, ARMS[name], steps=args.steps,
                                 seed=args.seed, out_root=args.out_root)
    print(json.dumps(scores, indent=2))
    if {"base", "decompose_off"} <= scores.keys():
        print("decompose on > off:", scores["base"] > scores["decompose_off"])
    if {"base", "flatten"} <= scores.keys():
        print("per-frame > flatten:", scores["base"] > scores["flatten"])
    if {"base", "average", "sum"} <= scores.keys():
        print("weighted >= average >= sum:",
              scores["base"] >= scores["average"] >= scores["sum"])


if __name__ == "__main__":
    main()
