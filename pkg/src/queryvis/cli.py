"""Command-line entry points: train, infer, eval, diagnose."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import viseval
from .config import RunConfig
from .inference import run_diagnostics, run_inference
from .train import train
from .vidgen import load_annotations


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queryvis",
        description="Video instance segmentation with query decomposition")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="optimize a model from a config file")
    p_train.add_argument("--config", required=True, help="YAML run config")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_infer = sub.add_parser("infer", help="predict instance tracks for videos")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input", required=True,
                         help="annotations JSON or a directory of frames")
    p_infer.add_argument("--frames", type=int, default=None,
                         help="build mask heads from k evenly sampled frames")
    p_infer.add_argument("--output", default=None, help="predictions JSON path")

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True, help="predictions JSON")
    p_eval.add_argument("--gt", required=True, help="annotations JSON")
    p_eval.add_argument("--output", default=None, help="write EvalResult JSON here")

    p_diag = sub.add_parser("diagnose", help="export attention diagnostics")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--video", type=int, required=True, help="video id")
    p_diag.add_argument("--annotations", required=True,
                        help="annotations JSON naming the video's frames")
    p_diag.add_argument("--out-dir", default="diagnostics")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "train":
        cfg = RunConfig.from_yaml(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        result = train(cfg, resume=args.resume)
        print(f"final checkpoint: {result['checkpoint']}")
        return 0

    if args.command == "infer":
        predictions = run_inference(args.checkpoint, args.input,
                                    mask_frames=args.frames, output=args.output)
        if args.output:
            print(f"wrote {len(predictions)} predictions to {args.output}")
        else:
            json.dump(predictions, sys.stdout)
        return 0

    if args.command == "eval":
        predictions = json.loads(Path(args.pred).read_text())
        dataset = load_annotations(args.gt)
        result = viseval.evaluate(predictions, dataset)
        print(viseval.format_table(result))
        if args.output:
            Path(args.output).write_text(json.dumps(result.as_dict()))
        return 0

    if args.command == "diagnose":
        record = run_diagnostics(args.checkpoint, args.video, args.annotations,
                                 args.out_dir)
        print(f"exported diagnostics for video {record['video_id']} to {args.out_dir}")
        return 0

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
