#!/usr/bin/env python3
"""
Input-length sweep (L = 6..9) for one model cell plus the threshold baseline, as a TABLE_II layout.

Usage:
  python scripts/length_sweep.py --dataset runs/ablation/data --out runs/lengths --format raw

Each length gets its own feature cache directory, since the cache path does
not encode L.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from slipfuse.baseline import BaselineConfig
from slipfuse.dataset import Format, load_dataset, make_splits
from slipfuse.evaluation import AblationGrid, EvalReport, baseline_rows, format_report, run_ablation, write_report
from slipfuse.features import Backbone, Modality
from slipfuse.training import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--format", default="raw", choices=["raw", "diff"])
    ap.add_argument("--modality", default="tactile_vision")
    ap.add_argument("--lengths", default="6,7,8,9")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--threshold", type=float, default=2.0, help="baseline slip threshold (px)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    manifest = load_dataset(args.dataset)
    out = Path(args.out)
    lengths = [int(x) for x in args.lengths.split(",")]
    train_ids, val_ids = make_splits(manifest, 0.85, args.seed)
    cfg = TrainConfig(batch_size=32, max_epochs=args.epochs, seed=args.seed)

    rows = []
    for L in lengths:
        grid = AblationGrid(formats=(Format.parse(args.format),), backbones=(Backbone.TINY_PATCH_STATS,),
                            modalities=(Modality.parse(args.modality),), lengths=(L,))
        rows += run_ablation(grid, manifest, train_ids, val_ids, cfg, out / f"cache_L{L}", out).rows
    rows += baseline_rows(manifest, val_ids, lengths, BaselineConfig(slip_threshold=args.threshold))
    report = EvalReport(rows)
    write_report(report, out)
    text = format_report(report, "TABLE_II")
    (out / "report.txt").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
