#!/usr/bin/env python3
"""Render a contact sheet of ROI | truth mask | Grad-CAM overlay rows.

    python scripts/render_overlays.py runs/default --arch gap-head-small -n 8

Reads the checkpoint and dataset of a finished run and writes
``<run>/overlays/<arch>-sheet.png``.
"""
import argparse
from pathlib import Path

import numpy as np

from camseg.data import ABNORMAL, fit_to_size, load_manifest, load_samples
from camseg.gradcam import make_cam, render_heatmap_overlay
from camseg.imaging import save_png
from camseg.metrics import mean_dice
from camseg.network import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("run", type=Path)
    ap.add_argument("--arch", default="gap-head-small")
    ap.add_argument("-n", type=int, default=8, help="number of abnormal ROIs")
    ap.add_argument("--rectified", action="store_true")
    args = ap.parse_args()

    ckpt = load_checkpoint(args.run / "checkpoints" / f"{args.arch}.ckpt")
    net = ckpt.network().astype(np.float64)
    size = ckpt.spec.input_size[0]
    samples = [fit_to_size(s, size) for s in load_samples(load_manifest(args.run / "data" / "manifest.jsonl"))]
    rows = []
    for s in [s for s in samples if s.label == ABNORMAL][: args.n]:
        cam = make_cam(net, s.image, ABNORMAL, rectify=args.rectified)
        gray = np.repeat(s.image[..., None], 3, axis=2)
        mask = np.repeat((s.mask * 255).astype(np.uint8)[..., None], 3, axis=2)
        rows.append(np.hstack([gray, mask, render_heatmap_overlay(s.image, cam)]))
        print(f"{s.id}  mean-Dice {mean_dice(s.mask, cam.gray):.3f}")
    out = args.run / "overlays" / f"{args.arch}-sheet.png"
    save_png(out, np.vstack(rows))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
