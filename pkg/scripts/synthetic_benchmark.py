#!/usr/bin/env python3
"""Desk-scale personalization benchmark on synthetic non-IID data.

Runs sub-fedavg-un, fedavg, and standalone under the same partition/seed and
prints the comparison table. Mirrors the setup the acceptance suite uses.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from subfed.config import parse_config
from subfed.experiment import compare_runs, run_experiment


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--separation", type=float, default=0.5)
    ap.add_argument("--out", default="runs/synthetic-benchmark")
    ap.add_argument("--parallelism", type=int, default=0)
    args = ap.parse_args()

    base = dict(
        dataset="synthetic", clients=10, rounds=args.rounds, sampling_rate=1.0,
        synth_classes=10, synth_per_class=200, synth_test_per_class=100,
        synth_separation=args.separation, shard_size=50, seed=args.seed,
        output_dir=args.out, parallelism=args.parallelism,
        rate_unstructured=5.0, target_unstructured=91.0,
        acc_threshold=50.0, eps_unstructured=1e-4,
    )
    run_dirs = []
    for algorithm in ("sub-fedavg-un", "fedavg", "standalone"):
        cfg = parse_config(overrides=dict(base, algorithm=algorithm))
        print(f"running {algorithm} ...")
        run_dirs.append(run_experiment(cfg))
    _, table = compare_runs(run_dirs)
    print(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
