#!/usr/bin/env python3
"""
Compare the baseline's relative-displacement trace with the generator's ground truth.

Usage:
  python scripts/baseline_oracle_check.py --seeds 20 --thresholds 1,2,3,4,5

Prints the worst trace error per (scenario, texture) and the slip-call rate
per scenario and threshold.
"""

from __future__ import annotations

import argparse
from collections import defaultdict

import numpy as np

from slipfuse.baseline import track_relative_displacement
from slipfuse.synthgrasp import Scenario, SynthParams, generate_trial


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--thresholds", default="1,2,3,4,5")
    ap.add_argument("--length", type=int, default=8)
    args = ap.parse_args()
    thresholds = [float(t) for t in args.thresholds.split(",")]

    worst = defaultdict(float)
    calls = defaultdict(int)
    for sc in Scenario:
        for seed in range(args.seeds):
            trial = generate_trial(sc, SynthParams(rng_seed=seed))
            f0 = trial.lift_frame_index
            sl = slice(f0 - 2, f0 + args.length)
            rel = track_relative_displacement(trial.gelsight_frames[sl])
            if sc is Scenario.TRANSLATIONAL_SLIP:
                gt = np.asarray(trial.meta["texture_offset"])[sl] - np.asarray(trial.meta["marker_offset"])[sl]
                gt = np.linalg.norm(gt - gt[0], axis=1)
                key = (sc.value, trial.meta["texture_type"])
                worst[key] = max(worst[key], float(np.abs(rel - gt).max()))
            for th in thresholds:
                calls[(sc.value, th)] += int(rel.max() > th)

    print("worst |trace - ground truth| (px)")
    for (sc, tex), err in sorted(worst.items()):
        print(f"  {sc:28s} {tex:8s} {err:.3f}")
    print("slip calls / trials")
    print("  " + " " * 28 + "".join(f"{th:>8.1f}" for th in thresholds))
    for sc in Scenario:
        print(f"  {sc.value:28s}" + "".join(f"{calls[(sc.value, th)]:>5d}/{args.seeds:<2d}" for th in thresholds))


if __name__ == "__main__":
    main()
