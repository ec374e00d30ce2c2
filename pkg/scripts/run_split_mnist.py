#!/usr/bin/env python3
"""Run the Split-MNIST benchmark at one or more memory budgets.

Expects the four IDX files (train/test images and labels) in --data-dir.
Writes one output directory per budget with metrics.csv, summary.json, and
per-seed checkpoints, then prints a compact results table.

Example:
    python3 scripts/run_split_mnist.py --data-dir data/mnist \
        --memory 100 500 1500 --seeds 0,1,2 --out runs/split_mnist
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from otcl.harness import RunConfig, run_experiment  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--memory", type=int, nargs="+", default=[100, 500, 1500])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/split_mnist")
    ap.add_argument("--random-insertion", action="store_true",
                    help="ablation: uniform-random memory writes")
    args = ap.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))

    results = []
    for m in args.memory:
        out_dir = os.path.join(args.out, f"m{m}" + ("_rand" if args.random_insertion else ""))
        cfg = RunConfig(
            dataset="mnist",
            data_dir=args.data_dir,
            num_tasks=5,
            classes_per_task=2,
            memory_size=m,
            batch_size=10,
            n_centroids=1,
            feat_dim=128,
            hidden_dim=400,
            seeds=seeds,
            out_dir=out_dir,
            random_insertion=args.random_insertion,
        )
        print(f"== memory {m}: {len(seeds)} seed(s) -> {out_dir}")
        _, summary = run_experiment(cfg)
        results.append((m, summary))
        print(f"   mean A_5 {summary['mean_avg_accuracy']:.4f} "
              f"(std {summary['std_avg_accuracy']:.4f}), "
              f"mean F_5 {summary['mean_avg_forgetting']:.4f}, "
              f"{summary['wall_clock_seconds']:.0f}s")

    print("\nmemory  mean_A5  std_A5  mean_F5")
    for m, s in results:
        print(f"{m:>6}  {s['mean_avg_accuracy']:.4f}  {s['std_avg_accuracy']:.4f}"
              f"  {s['mean_avg_forgetting']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
