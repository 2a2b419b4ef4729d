"""Command-line interface: gen-data, train, sample, eval, bench-scan, param-count."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import bench_scan, format_report
from .checkpoint import CheckpointError, load_checkpoint, model_from_config
from .config import ConfigError, resolve_config
from .data import (CAPTIONS, MotionSample, build_corpus, caption_id, load_corpus,
                   save_corpus, save_motion_blob)
from .diffusion import build_schedule, sample_sequence
from .evaluation import evaluate_model
from .rng import stream_rng
from .training import train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="motionssm",
                     description="Text-conditioned motion diffusion at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus directory")
    p.add_argument("--config", default="desk", help="preset name or config file")
    p.add_argument("--out", required=True, help="corpus output directory")

    p = sub.add_parser("train", help="train and write checkpoint + metrics CSV")
    p.add_argument("--config", default="desk")
    p.add_argument("--corpus", default=None, help="corpus directory (generated if omitted)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("sample", help="generate motion from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--caption", required=True, choices=CAPTIONS)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddim")
    p.add_argument("--guidance", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory for motion files")
    p.add_argument("--plot-csv", default=None, help="also write per-channel trajectory CSV")

    p = sub.add_parser("eval", help="print metrics JSON for the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", default=None, help="corpus directory (regenerated if omitted)")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddim")
    p.add_argument("--guidance", type=float, default=None, help="defaults to config value")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench-scan", help="benchmark the scan strategies")
    p.add_argument("--config", default="desk")
    p.add_argument("--lengths", default="16,32,64", help="comma-separated lengths")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("param-count", help="print the trainable parameter count")
    p.add_argument("--config", default="desk")
    p.add_argument("--scan-mode", choices=("forward", "bidir", "mirror"), default=None)
    return parser


def _cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config)
    corpus = build_corpus(cfg.train_count, cfg.valid_count, cfg.test_count,
                          master_seed=cfg.seed, min_len=cfg.min_len, max_len=cfg.max_len)
    save_corpus(args.out, corpus)
    total = sum(len(v) for v in corpus.values())
    print(f"wrote {total} sequences to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    ckpt = train(cfg, args.out, corpus_dir=args.corpus)
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {Path(args.out) / 'metrics.csv'}")
    return 0


def _cmd_sample(args) -> int:
    model, cfg, normalizer = load_checkpoint(args.ckpt)
    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    cap = caption_id(args.caption)
    rng = stream_rng(args.seed, "sample")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(args.num_samples):
        frames = sample_sequence(model, schedule, cap, args.length, args.steps,
                                 args.sampler, args.guidance, rng,
                                 normalizer=normalizer)
        uid = f"sample_{i:05d}"
        save_motion_blob(out_dir / f"{uid}.f32", frames)
        lines.append(f"{uid} {args.caption} {args.length} {args.seed}")
        if args.plot_csv and i == 0:
            header = "frame," + ",".join(f"ch{c}" for c in range(frames.shape[1]))
            rows = [f"{j}," + ",".join(f"{v:.6f}" for v in frames[j])
                    for j in range(frames.shape[0])]
            Path(args.plot_csv).write_text("\n".join([header, *rows]) + "\n")
    (out_dir / "samples.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.num_samples} motion file(s) to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    model, cfg, normalizer = load_checkpoint(args.ckpt)
    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    if args.corpus is not None:
        test = load_corpus(args.corpus)["test"]
    else:
        test = build_corpus(cfg.train_count, cfg.valid_count, cfg.test_count,
                            master_seed=cfg.seed, min_len=cfg.min_len,
                            max_len=cfg.max_len)["test"]
    guidance = cfg.guidance_scale if args.guidance is None else args.guidance
    metrics = evaluate_model(model, schedule, normalizer, test, args.steps,
                             args.sampler, guidance, seed=args.seed)
    print(json.dumps(metrics))
    return 0


def _cmd_bench_scan(args) -> int:
    cfg = resolve_config(args.config)
    lengths = [int(part) for part in args.lengths.split(",") if part.strip()]
    report = bench_scan(cfg, lengths, repeats=args.repeats, warmup=args.warmup)
    print(format_report(report))
    return 0


def _cmd_param_count(args) -> int:
    cfg = resolve_config(args.config)
    if args.scan_mode is not None:
        cfg.scan_mode = args.scan_mode
    model = model_from_config(cfg)
    print(model.param_count())
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "bench-scan": _cmd_bench_scan,
    "param-count": _cmd_param_count,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
