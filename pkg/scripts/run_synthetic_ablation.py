#!/usr/bin/env python3
"""
Format x modality ablation on a synthetic grasp set, printed as a TABLE_I layout.

Usage:
  python scripts/run_synthetic_ablation.py --out runs/ablation --per-scenario 100 --epochs 30

Renders the dataset under <out>/data (skipped if a manifest is already there),
caches features under <out>/cache and writes report.{json,csv,txt} to <out>.
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from slipfuse.dataset import Format, load_dataset, make_splits
from slipfuse.evaluation import AblationGrid, format_report, run_ablation, write_report
from slipfuse.features import Backbone, Modality
from slipfuse.synthgrasp import Scenario, SynthParams, generate_dataset
from slipfuse.training import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--per-scenario", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--grid", type=int, default=8)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    data = out / "data"
    t0 = time.time()
    if (data / "manifest.json").is_file():
        manifest = load_dataset(data)
    else:
        plan = [(sc, args.per_scenario) for sc in Scenario]
        manifest = generate_dataset(plan, SynthParams(rng_seed=args.seed), data, workers=args.workers)
    print(f"{len(manifest)} trials ready in {time.time() - t0:.0f}s")

    train_ids, val_ids = make_splits(manifest, 0.85, args.seed)
    grid = AblationGrid(
        formats=(Format.RAW, Format.DIFFERENCE),
        backbones=(Backbone.TINY_PATCH_STATS,),
        modalities=(Modality.TACTILE_VISION, Modality.TACTILE, Modality.VISION),
        lengths=(8,),
        grid_size=args.grid,
    )
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed)
    report = run_ablation(grid, manifest, train_ids, val_ids, cfg, out / "cache", out, workers=args.workers)
    write_report(report, out)
    text = format_report(report, "TABLE_I")
    (out / "report.txt").write_text(text)
    print(text)
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
