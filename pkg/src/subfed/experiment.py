"""Config-driven experiment execution and on-disk artifacts.

A run writes into a temp directory and is renamed to runs/run-NNNN on success,
so artifacts are fully written or absent and reruns never overwrite. Every
output embeds the resolved config (minus execution-only keys) for provenance.
"""

from __future__ import annotations

import json
import os
import shutil
import uuid
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_to_ini
from .data import (
    Dataset,
    channel_stats,
    load_cifar_binary,
    load_idx,
    normalize,
    pad_images,
    partition_shards,
    split_per_class,
    synth_dataset,
)
from .engine import builtin_spec, evaluate_accuracy, init_params
from .federation import ClientState, RoundReport, ServerState, make_client, run_round
from .metrics import CostLedger, conv_flops
from .pruning import PruneSchedule, apply_mask

# keys that affect execution but not results; left out of provenance echoes so
# identical experiments produce byte-identical summaries
_EXECUTION_KEYS = ("parallelism", "output_dir")


def provenance_dict(cfg: ExperimentConfig) -> dict:
    echo = asdict(cfg)
    for key in _EXECUTION_KEYS:
        echo.pop(key)
    return echo


def _load_idx_pair(root: Path, name: str) -> tuple[Dataset, Dataset]:
    base = root / name
    train = load_idx(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte",
                     name=f"{name}-train")
    test = load_idx(base / "t10k-images-idx3-ubyte", base / "t10k-labels-idx1-ubyte",
                    name=f"{name}-test")
    return train, test


def _load_cifar(root: Path, name: str) -> tuple[Dataset, Dataset]:
    base = root / name
    if name == "cifar10":
        train = load_cifar_binary(
            [base / f"data_batch_{i}.bin" for i in range(1, 6)], name=f"{name}-train"
        )
        test = load_cifar_binary([base / "test_batch.bin"], name=f"{name}-test")
    else:
        train = load_cifar_binary([base / "train.bin"], cifar100=True, name=f"{name}-train")
        test = load_cifar_binary([base / "test.bin"], cifar100=True, name=f"{name}-test")
    return train, test


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test pair per config, padded to the model input and normalized by
    train-set channel statistics (synthetic data is already standard normal)."""
    spec = builtin_spec(cfg.resolved_model())
    if cfg.dataset == "synthetic":
        full = synth_dataset(
            cfg.synth_classes,
            cfg.synth_per_class,
            cfg.synth_separation,
            cfg.seed,
            image_shape=spec.input_shape,
        )
        return split_per_class(full, cfg.synth_test_per_class)
    root = cfg.resolved_data_root()
    if root is None:
        raise ConfigError(f"dataset {cfg.dataset!r} needs a data root")
    if cfg.dataset in ("mnist", "emnist"):
        train, test = _load_idx_pair(root, cfg.dataset)
    else:
        train, test = _load_cifar(root, cfg.dataset)
    h, w = spec.input_shape[1], spec.input_shape[2]
    train = pad_images(train, h, w)
    test = pad_images(test, h, w)
    mean, std = channel_stats(train)
    return normalize(train, mean, std), normalize(test, mean, std)


def make_schedule(cfg: ExperimentConfig) -> PruneSchedule:
    if cfg.algorithm == "sub-fedavg-un":
        targets = (cfg.target_unstructured, 0.0)
    elif cfg.algorithm == "sub-fedavg-hy":
        targets = (cfg.target_unstructured, cfg.target_structured)
    else:
        targets = (0.0, 0.0)  # fedavg / standalone never prune
    return PruneSchedule(
        rate_unstructured=cfg.rate_unstructured,
        rate_structured=cfg.rate_structured,
        target_unstructured=targets[0],
        target_structured=targets[1],
        acc_threshold=cfg.acc_threshold,
        eps_unstructured=cfg.eps_unstructured,
        eps_structured=cfg.eps_structured,
    )


def build_experiment(cfg: ExperimentConfig):
    """Wire config -> (server, clients dict); deterministic in cfg.seed."""
    spec = builtin_spec(cfg.resolved_model())
    train, test = load_datasets(cfg)
    partition = partition_shards(
        train, test, cfg.clients, cfg.shards_per_client, cfg.resolved_shard_size(), cfg.seed
    )
    theta0 = init_params(spec, cfg.seed)
    schedule = make_schedule(cfg)
    clients: dict[int, ClientState] = {}
    for cid, indices in partition.assignment.items():
        rng = np.random.default_rng((cfg.seed, 31, cid))
        perm = rng.permutation(len(indices))
        n_val = max(1, int(round(cfg.val_fraction * len(indices))))
        val_idx = indices[perm[:n_val]]
        train_idx = indices[perm[n_val:]]
        eval_idx = partition.eval_assignment[cid]
        clients[cid] = make_client(
            cid,
            spec,
            theta0,
            train.images[train_idx], train.labels[train_idx],
            train.images[val_idx], train.labels[val_idx],
            test.images[eval_idx], test.labels[eval_idx],
            schedule,
            cfg.learning_rate,
            cfg.momentum,
            hybrid=(cfg.algorithm == "sub-fedavg-hy"),
        )
    server = ServerState(
        spec=spec,
        params=theta0.copy(),
        client_ids=tuple(sorted(clients)),
        sampling_rate=cfg.sampling_rate,
        seed=cfg.seed,
    )
    return server, clients


SUMMARY_COLUMNS = (
    "round", "algorithm", "mean_local_accuracy", "mean_served_accuracy",
    "mean_sparsity_unstructured", "mean_sparsity_channel",
    "cumulative_bytes", "cumulative_conv_flops",
)


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _write_csv(path: Path, comment: str, header, rows) -> None:
    with open(path, "w") as f:
        f.write(f"# config: {comment}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def run_experiment(cfg: ExperimentConfig, progress=None) -> Path:
    """Execute the configured experiment; returns the finished run directory."""
    out_root = Path(cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    tmp = out_root / f".tmp-{os.getpid()}-{uuid.uuid4().hex[:8]}"
    tmp.mkdir()
    try:
        run_dir = _run_into(cfg, tmp, progress)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return run_dir


def _next_run_name(out_root: Path) -> str:
    taken = []
    for entry in out_root.glob("run-*"):
        suffix = entry.name[4:]
        if suffix.isdigit():
            taken.append(int(suffix))
    return f"run-{(max(taken) + 1 if taken else 1):04d}"


def _run_into(cfg: ExperimentConfig, tmp: Path, progress) -> Path:
    server, clients = build_experiment(cfg)
    parallelism = cfg.parallelism or os.cpu_count() or 1
    echo = json.dumps(provenance_dict(cfg), sort_keys=True)
    ledger = CostLedger()
    reports: list[RoundReport] = []
    cum_bits = 0
    cum_flops = 0
    summary_rows = []
    sparsity_rows = []
    with open(tmp / "rounds.ndjson", "w") as stream:
        stream.write(json.dumps({"config": provenance_dict(cfg)}, sort_keys=True) + "\n")
        for _ in range(cfg.rounds):
            report = run_round(
                server, clients, cfg.algorithm,
                epochs=cfg.local_epochs,
                batch_size=cfg.batch_size,
                parallelism=parallelism,
                aggregation_mode=cfg.aggregation,
            )
            reports.append(report)
            ledger.record_round(
                {c.client_id: (c.uplink_bits, c.downlink_bits) for c in report.clients}
            )
            cum_bits += report.total_uplink_bits + report.total_downlink_bits
            cum_flops += report.total_conv_flops
            stream.write(json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
            summary_rows.append((
                report.round_index, cfg.algorithm,
                report.mean_local_accuracy, report.mean_served_accuracy,
                report.mean_sparsity_unstructured, report.mean_sparsity_channel,
                cum_bits / 8, cum_flops,
            ))
            sparsity_rows.append(
                (report.round_index, report.mean_sparsity, report.mean_local_accuracy)
            )
            if progress is not None:
                progress(report)

    _write_csv(tmp / "summary.csv", echo, SUMMARY_COLUMNS, summary_rows)
    _write_csv(
        tmp / "plot_accuracy_vs_round.csv", echo,
        ("round", "mean_local_accuracy", "mean_served_accuracy"),
        [(r.round_index, r.mean_local_accuracy, r.mean_served_accuracy) for r in reports],
    )
    _write_csv(
        tmp / "plot_accuracy_vs_sparsity.csv", echo,
        ("round", "mean_sparsity", "mean_local_accuracy"), sparsity_rows,
    )

    # final per-client table covers every client, not only the last-round sample
    client_rows = []
    for cid in sorted(clients):
        client = clients[cid]
        local = evaluate_accuracy(server.spec, client.params, client.x_eval, client.y_eval)
        if cfg.algorithm == "standalone":
            served = local
        else:
            served = evaluate_accuracy(
                server.spec, apply_mask(server.params, client.mask),
                client.x_eval, client.y_eval,
            )
        client_rows.append((
            cid, local, served,
            client.mask.sparsity(),
            client.mask.covered_sparsity(),
            client.mask.channel_sparsity(),
            client.schedule.level_unstructured,
            client.schedule.level_structured,
        ))
    _write_csv(
        tmp / "client_accuracy.csv", echo,
        ("client_id", "local_accuracy", "served_accuracy", "sparsity",
         "sparsity_unstructured", "sparsity_channel",
         "schedule_level_unstructured", "schedule_level_structured"),
        client_rows,
    )

    payload = ledger.to_json_dict()
    payload["config"] = provenance_dict(cfg)
    (tmp / "cost_ledger.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    (tmp / "config.ini").write_text(config_to_ini(cfg))

    out_root = Path(cfg.output_dir)
    final = out_root / _next_run_name(out_root)
    os.replace(tmp, final)
    return final


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------

COMPARE_COLUMNS = (
    "run", "algorithm", "final_local_acc", "final_served_acc",
    "sparsity_unstructured", "sparsity_channel", "total_mb", "flop_reduction",
)


def _read_summary(path: Path):
    if path.is_dir():
        path = path / "summary.csv"
    if not path.exists():
        raise ValueError(f"no summary at {path}")
    config = None
    rows = []
    header = None
    for line in path.read_text().splitlines():
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: "):])
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append(dict(zip(header, line.split(","))))
    if not rows:
        raise ValueError(f"{path}: summary has no data rows")
    return config, rows


def compare_runs(paths) -> tuple[list[dict], str]:
    """Side-by-side final metrics for >= 2 runs, plus deltas vs the first run."""
    paths = [Path(p) for p in paths]
    if len(paths) < 2:
        raise ValueError("compare needs at least two runs")
    entries = []
    for path in paths:
        config, rows = _read_summary(path)
        last = rows[-1]
        flop_reduction = 1.0
        if config is not None:
            model = config.get("model") or ExperimentConfig(
                dataset=config.get("dataset", "synthetic")
            ).resolved_model()
            dense = conv_flops(builtin_spec(model)).dense_total
            if len(rows) >= 2:
                last_round_flops = float(last["cumulative_conv_flops"]) - float(
                    rows[-2]["cumulative_conv_flops"]
                )
            else:
                last_round_flops = float(last["cumulative_conv_flops"])
            per_client = last_round_flops / _clients_in_round(config)
            if dense > 0 and per_client > 0:
                flop_reduction = dense / per_client
        entries.append({
            "run": str(path),
            "algorithm": last["algorithm"],
            "final_local_acc": float(last["mean_local_accuracy"]),
            "final_served_acc": float(last["mean_served_accuracy"]),
            "sparsity_unstructured": float(last["mean_sparsity_unstructured"]),
            "sparsity_channel": float(last["mean_sparsity_channel"]),
            "total_mb": float(last["cumulative_bytes"]) / 1e6,
            "flop_reduction": flop_reduction,
        })
    base = entries[0]
    for entry in entries:
        entry["delta_local_acc"] = entry["final_local_acc"] - base["final_local_acc"]
        entry["delta_total_mb"] = entry["total_mb"] - base["total_mb"]
    headers = list(COMPARE_COLUMNS) + ["delta_local_acc", "delta_total_mb"]
    widths = {h: max(len(h), *(len(_cell(e, h)) for e in entries)) for h in headers}
    lines = ["  ".join(h.ljust(widths[h]) for h in headers)]
    for entry in entries:
        lines.append("  ".join(_cell(entry, h).ljust(widths[h]) for h in headers))
    return entries, "\n".join(lines)


def _clients_in_round(config: dict) -> int:
    n = int(config.get("clients", 1))
    rate = float(config.get("sampling_rate", 1.0))
    return min(n, max(1, round(rate * n)))


def _cell(entry: dict, key: str) -> str:
    value = entry[key]
    return f"{value:.4f}" if isinstance(value, float) else str(value)
