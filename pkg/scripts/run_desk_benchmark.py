#!/usr/bin/env python3
"""Run the full desk-scale benchmark and print the headline numbers.

Usage: python scripts/run_desk_benchmark.py [out_dir] [--seed S]

Rerunning with the same out_dir reuses every cached stage.
"""

import argparse
import copy
import time

from retarget.pipeline import DEFAULT_CONFIG, run_pipeline


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir", nargs="?", default="runs/desk")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    config = copy.deepcopy(DEFAULT_CONFIG)
    config["seed"] = args.seed
    t0 = time.time()
    report = run_pipeline(config, args.out_dir)
    metrics = report["metrics"]
    print(f"\npipeline finished in {time.time() - t0:.0f}s -> {args.out_dir}/report.json")
    print("\nmean vertex error vs rig ground truth:")
    for name, err in sorted(metrics["benchmark_mean_vertex_error"].items()):
        print(f"  {name:>8}: {err:.6f}")
    print(f"\nstage3 vs stage1 improvement: {metrics['stage3_vs_stage1_improvement_pct']:.1f}%")
    print(f"triplet violations per stage: {metrics['triplet_violations']}")
    print(f"triplet counts: {metrics['triplet_counts']}")


if __name__ == "__main__":
    main()
