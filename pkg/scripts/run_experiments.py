#!/usr/bin/env python3
"""Run both experiments on one config and print the two reports.

    python scripts/run_experiments.py --config configs/default.yaml --out runs/default

Experiment 2 reuses the first-stage checkpoints written by Experiment 1, so
the second step only trains the filtered-ROI classifiers.
"""
import argparse
import logging
import shutil
from pathlib import Path

from camseg.harness import experiment1, experiment2, load_config, render_report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path, default=Path("configs/default.yaml"))
    ap.add_argument("--out", type=Path, default=Path("runs/default"))
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = cfg.synthetic.seed = args.seed
    cfg.out_dir = args.out

    rep1 = experiment1(cfg)
    print(render_report(rep1, "text").decode())
    # keep Experiment 1's report; experiment2 overwrites report.* in the same directory
    for name in ("report.json", "report.txt"):
        shutil.copy(cfg.out_dir / name, cfg.out_dir / f"exp1-{name}")
    rep2 = experiment2(cfg, reuse=True)
    print(render_report(rep2, "text").decode())


if __name__ == "__main__":
    main()
