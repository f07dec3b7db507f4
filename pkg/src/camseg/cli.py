"""Command-line entry point: ``camseg <subcommand> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import ABNORMAL, SynthConfig, fit_to_size, load_manifest, load_samples, synth_generate
from .gradcam import make_cam, render_heatmap_overlay
from .harness import (
    ExperimentConfig,
    config_from_dict,
    experiment1,
    experiment2,
    load_config,
    parse_report,
    recompute_metrics,
    render_report,
)
from .imaging import load_gray, resize_nearest, save_png
from .metrics import averaged_mean_dice
from .network import (
    build_network,
    evaluate,
    load_checkpoint,
    preset,
    save_checkpoint,
    train,
)
from .repro import derive_seed


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config file)")
    p.add_argument("--config", type=Path, default=None, help="YAML experiment config file")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="camseg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"camseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic ROI dataset")
    p.add_argument("--count", type=int, default=None, help="ROIs per class")
    p.add_argument("--size", type=int, default=None, help="ROI edge length in pixels")

    p = sub.add_parser("train", parents=[common], help="train one architecture on a manifest")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest (.jsonl)")
    p.add_argument("--arch", default="gap-head-small", help="architecture preset")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience")

    p = sub.add_parser("gradcam", parents=[common], help="write Grad-CAM PNGs for every ROI in a manifest")
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest (.jsonl)")
    p.add_argument("--class", dest="cls", type=int, default=ABNORMAL, choices=(0, 1), help="output node (default 1)")
    p.add_argument("--rectified", action="store_true", help="clamp negative CAM values to zero")
    p.add_argument("--overlay", action="store_true", help="also write colour overlays")

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint and/or mean-Dice of CAM PNGs")
    p.add_argument("--checkpoint", type=Path, default=None, help="checkpoint to score")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest (.jsonl)")
    p.add_argument("--cams", type=Path, default=None, help="directory of <id>.png CAMs to score against masks")

    sub.add_parser("exp1", parents=[common], help="run Experiment #1 (train, Grad-CAM, mean-Dice)")
    p = sub.add_parser("exp2", parents=[common], help="run Experiment #2 (filtered retraining)")
    p.add_argument("--no-reuse", action="store_true", help="retrain first-stage models even if checkpoints match")

    p = sub.add_parser("report", parents=[common], help="print or recompute a run's report")
    p.add_argument("--format", choices=("text", "json"), default="text", help="output format")
    p.add_argument("--recompute-metrics", action="store_true",
                   help="rebuild Dice from persisted CAMs and manifest; exit 1 if it differs")
    return parser


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.synthetic is not None:
            cfg.synthetic = dataclasses.replace(cfg.synthetic, seed=args.seed)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _out(args, default: str = ".") -> Path:
    return args.out if args.out is not None else Path(default)


def _cmd_gen_data(args) -> int:
    cfg = _experiment_config(args)
    syn = cfg.synthetic or SynthConfig()
    if args.count is not None:
        syn = dataclasses.replace(syn, count_per_class=args.count)
    if args.size is not None:
        syn = dataclasses.replace(syn, image_size=args.size)
    out = _out(args, "data")
    manifest = synth_generate(syn, out)
    print(f"wrote {len(manifest.records)} ROIs to {out / 'manifest.jsonl'}")
    return 0


def _cmd_train(args) -> int:
    cfg = _experiment_config(args)
    samples = load_samples(load_manifest(args.manifest))
    size = samples[0].image.shape[0]
    samples = [fit_to_size(s, size) for s in samples]
    tc = cfg.train
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs, patience=min(tc.patience, args.epochs))
    if args.patience is not None:
        tc = dataclasses.replace(tc, patience=args.patience)
    tc = dataclasses.replace(tc, seed=derive_seed(cfg.seed, "train", "original", args.arch))
    net = build_network(preset(args.arch, size), derive_seed(cfg.seed, "init", "original", args.arch), tc.precision)
    ckpt = train(net, samples, tc)
    path = _out(args) / "checkpoints" / f"{args.arch}.ckpt"
    save_checkpoint(ckpt, path)
    print(f"{args.arch}: best val_acc {ckpt.best_val_acc:.4f} at epoch {ckpt.best_epoch}; saved {path}")
    return 0


def _cmd_gradcam(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.network().astype(np.float64)
    size = ckpt.spec.input_size[0]
    out = _out(args)
    samples = [fit_to_size(s, size) for s in load_samples(load_manifest(args.manifest))]
    for s in samples:
        cam = make_cam(net, s.image, args.cls, rectify=args.rectified)
        save_png(out / "cams" / ckpt.spec.name / f"{s.id}.png", cam.gray)
        if args.overlay:
            save_png(out / "overlays" / ckpt.spec.name / f"{s.id}.png", render_heatmap_overlay(s.image, cam))
    print(f"wrote {len(samples)} CAMs to {out / 'cams' / ckpt.spec.name}")
    return 0


def _cmd_eval(args) -> int:
    if args.checkpoint is None and args.cams is None:
        raise ValueError("eval needs --checkpoint and/or --cams")
    manifest = load_manifest(args.manifest)
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        samples = [fit_to_size(s, ckpt.spec.input_size[0]) for s in load_samples(manifest)]
        print(f"accuracy {evaluate(ckpt.network(), samples):.4f}")
    if args.cams is not None:
        pairs = []
        for r in manifest.records:
            if r.label != ABNORMAL:
                continue
            gray = load_gray(args.cams / f"{r.id}.png")
            mask = load_gray(manifest.resolve(r.mask_path)) > 0
            if mask.shape != gray.shape:
                mask = resize_nearest(mask, *gray.shape)
            pairs.append((mask, gray))
        print(f"averaged mean-Dice {averaged_mean_dice(pairs):.4f} over {len(pairs)} abnormal ROIs")
    return 0


def _cmd_exp(args) -> int:
    cfg = _experiment_config(args)
    if args.command == "exp1":
        report = experiment1(cfg)
    else:
        report = experiment2(cfg, reuse=not args.no_reuse)
    sys.stdout.write(render_report(report, "text").decode())
    return 0


def _cmd_report(args) -> int:
    out = _out(args)
    report = parse_report((out / "report.json").read_bytes())
    status = 0
    if args.recompute_metrics:
        fresh = recompute_metrics(out)
        for old, new in zip(report.rows, fresh.rows):
            if old.dice != new.dice:
                print(f"{old.arch}: dice {old.dice!r} recomputed as {new.dice!r}", file=sys.stderr)
                status = 1
        report = fresh
    sys.stdout.write(render_report(report, args.format).decode())
    return status


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "gradcam": _cmd_gradcam,
    "eval": _cmd_eval,
    "exp1": _cmd_exp,
    "exp2": _cmd_exp,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"camseg {args.command}: error: {msg}", file=sys.stderr)
        return 1
