"""Command line entry points: run, compare, partition-dump, flops, cost."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import (
    AGGREGATION_CHOICES,
    ALGORITHM_CHOICES,
    DATASETS,
    ConfigError,
    parse_config,
)
from .engine import builtin_spec
from .metrics import comm_cost_closed_form, conv_flops

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="INI config file (flags override it)")
    p.add_argument("--algorithm", choices=ALGORITHM_CHOICES, default=None)
    p.add_argument("--dataset", choices=DATASETS, default=None)
    p.add_argument("--data-root", dest="data_root", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--clients", type=int, default=None)
    p.add_argument("--sampling-rate", dest="sampling_rate", type=float, default=None)
    p.add_argument("--epochs", dest="local_epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--r-us", dest="rate_unstructured", type=float, default=None)
    p.add_argument("--r-s", dest="rate_structured", type=float, default=None)
    p.add_argument("--p-us", dest="target_unstructured", type=float, default=None)
    p.add_argument("--p-s", dest="target_structured", type=float, default=None)
    p.add_argument("--eps-us", dest="eps_unstructured", type=float, default=None)
    p.add_argument("--eps-s", dest="eps_structured", type=float, default=None)
    p.add_argument("--acc-th", dest="acc_threshold", type=float, default=None)
    p.add_argument("--aggregation", choices=AGGREGATION_CHOICES, default=None)
    p.add_argument("--shard-size", dest="shard_size", type=int, default=None)
    p.add_argument("--shards-per-client", dest="shards_per_client", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", dest="output_dir", default=None)
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--synth-classes", dest="synth_classes", type=int, default=None)
    p.add_argument("--synth-per-class", dest="synth_per_class", type=int, default=None)
    p.add_argument("--synth-test-per-class", dest="synth_test_per_class", type=int, default=None)
    p.add_argument("--synth-separation", dest="synth_separation", type=float, default=None)
    p.add_argument("--quiet", action="store_true")


_OVERRIDE_KEYS = (
    "algorithm", "dataset", "data_root", "model", "rounds", "clients", "sampling_rate",
    "local_epochs", "batch_size", "learning_rate", "momentum", "rate_unstructured",
    "rate_structured", "target_unstructured", "target_structured", "eps_unstructured",
    "eps_structured", "acc_threshold", "aggregation", "shard_size", "shards_per_client",
    "seed", "output_dir", "parallelism", "synth_classes", "synth_per_class",
    "synth_test_per_class", "synth_separation",
)


def _config_from_args(args) -> "ExperimentConfig":
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS}
    return parse_config(args.config, overrides)


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _config_from_args(args)

    def progress(report):
        if not args.quiet:
            print(
                f"round {report.round_index:4d}  "
                f"acc(local) {report.mean_local_accuracy:6.2f}  "
                f"acc(served) {report.mean_served_accuracy:6.2f}  "
                f"sparsity {report.mean_sparsity_unstructured:5.3f}/"
                f"{report.mean_sparsity_channel:5.3f}"
            )

    run_dir = run_experiment(cfg, progress=progress)
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import compare_runs

    _, table = compare_runs(args.runs)
    print(table)
    return EXIT_OK


def cmd_partition_dump(args) -> int:
    from .data import partition_shards
    from .experiment import load_datasets

    cfg = _config_from_args(args)
    train, test = load_datasets(cfg)
    partition = partition_shards(
        train, test, cfg.clients, cfg.shards_per_client, cfg.resolved_shard_size(), cfg.seed
    )
    payload = partition.to_json_dict()
    payload["dataset"] = cfg.dataset
    payload["seed"] = cfg.seed
    text = json.dumps(payload, sort_keys=True)
    if args.dump_out:
        Path(args.dump_out).write_text(text)
        print(f"partition written to {args.dump_out}")
    else:
        print(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    from .engine import Conv, walk_shapes

    spec = builtin_spec(args.model)
    keep_sets = None
    if args.channel_prune:
        keep_sets = {}
        for name, desc, _i, _o in walk_shapes(spec):
            if isinstance(desc, Conv):
                pruned = int(desc.out_channels * args.channel_prune / 100)
                kept = max(1, desc.out_channels - pruned)
                keep = np.zeros(desc.out_channels, dtype=bool)
                keep[:kept] = True
                keep_sets[name] = keep
    profile = conv_flops(spec, keep_sets)
    for name, dense, current in profile.per_layer:
        print(f"{name}: dense {dense} FLOPs, current {current} FLOPs")
    print(f"total: dense {profile.dense_total}, current {profile.current_total}, "
          f"reduction {profile.reduction_factor:.4f}x")
    return EXIT_OK


def cmd_cost(args) -> int:
    cost = comm_cost_closed_form(args.rounds, args.bits, args.params)
    print(f"bits: {cost.bits}")
    print(f"bytes: {cost.total_bytes}")
    print(f"MB: {cost.megabytes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subfed",
        description="Federated learning with per-client subnetwork pruning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an experiment")
    _add_run_flags(run_p)
    run_p.set_defaults(func=cmd_run)

    cmp_p = sub.add_parser("compare", help="side-by-side table over finished runs")
    cmp_p.add_argument("runs", nargs="+", help="run directories or summary.csv files")
    cmp_p.set_defaults(func=cmd_compare)

    part_p = sub.add_parser("partition-dump", help="dump the shard partition as JSON")
    _add_run_flags(part_p)
    part_p.add_argument("--dump-out", default=None, help="write JSON here instead of stdout")
    part_p.set_defaults(func=cmd_partition_dump)

    flops_p = sub.add_parser("flops", help="conv FLOP profile for a model spec")
    flops_p.add_argument("--model", required=True)
    flops_p.add_argument("--channel-prune", type=float, default=0.0,
                         help="uniform per-layer channel prune percentage")
    flops_p.set_defaults(func=cmd_flops)

    cost_p = sub.add_parser("cost", help="closed-form communication cost")
    cost_p.add_argument("--rounds", type=int, required=True)
    cost_p.add_argument("--bits", type=int, default=32)
    cost_p.add_argument("--params", type=int, required=True)
    cost_p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures exit 2 with a structured report
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        if "--debug" in (argv or sys.argv):
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
