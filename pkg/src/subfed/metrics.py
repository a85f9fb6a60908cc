"""Communication-cost accounting, conv FLOP counting, and accuracy summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Conv, ModelSpec, walk_shapes
from .pruning import SparsityMask

BITS_PER_SCALAR = 32
BITS_PER_MASK_POSITION = 1


@dataclass(frozen=True)
class CostBreakdown:
    bits: int

    @property
    def total_bytes(self) -> float:
        return self.bits / 8

    @property
    def megabytes(self) -> float:
        # decimal MB: 524.16 MB style figures come out exact
        return self.bits / 8 / 1e6


def comm_cost_closed_form(rounds: int, bits_per_scalar: int, param_count: int) -> CostBreakdown:
    """Closed-form per-client cost over a run: rounds x bits x params x 2 (up+down)."""
    for label, value in (("rounds", rounds), ("bits", bits_per_scalar), ("params", param_count)):
        if value < 0:
            raise ValueError(f"{label} must be non-negative, got {value}")
    return CostBreakdown(int(rounds) * int(bits_per_scalar) * int(param_count) * 2)


@dataclass
class FlopProfile:
    per_layer: list[tuple[str, int, int]]  # (conv name, dense flops, current flops)
    dense_total: int
    current_total: int

    @property
    def reduction_factor(self) -> float:
        if self.current_total == 0:
            return float("inf") if self.dense_total else 1.0
        return self.dense_total / self.current_total


def conv_flops(spec: ModelSpec, keep_sets: dict[str, np.ndarray] | None = None) -> FlopProfile:
    """Per-conv-layer FLOPs (2 per multiply-accumulate) at the given channel
    keep-sets; BN/pool/dense are excluded from the count."""
    per_layer = []
    dense_total = current_total = 0
    prev_kept: int | None = None
    for name, desc, in_shape, out_shape in walk_shapes(spec):
        if not isinstance(desc, Conv):
            continue
        kept_out = desc.out_channels
        if keep_sets is not None and name in keep_sets:
            kept_out = int(np.asarray(keep_sets[name]).sum())
        kept_in = desc.in_channels if prev_kept is None else prev_kept
        oh, ow = out_shape[1], out_shape[2]
        dense = 2 * desc.in_channels * desc.kernel * desc.kernel * desc.out_channels * oh * ow
        current = 2 * kept_in * desc.kernel * desc.kernel * kept_out * oh * ow
        per_layer.append((name, dense, current))
        dense_total += dense
        current_total += current
        prev_kept = kept_out
    return FlopProfile(per_layer, dense_total, current_total)


def param_reduction(mask: SparsityMask) -> float:
    """Zeroed fraction of the dense learnable parameter count."""
    return mask.sparsity()


@dataclass
class AccuracySummary:
    final_round: int
    mean: float
    minimum: float
    maximum: float
    mean_served: float
    curve: list[tuple[int, float, float]]  # (round, mean local, mean served)


def accuracy_summary(reports) -> AccuracySummary:
    """Final-round client accuracy statistics plus the accuracy-vs-round curve."""
    reports = list(reports)
    if not reports:
        raise ValueError("accuracy_summary needs at least one round report")
    last = reports[-1]
    locals_ = [c.local_accuracy for c in last.clients]
    return AccuracySummary(
        final_round=last.round_index,
        mean=float(np.mean(locals_)),
        minimum=float(np.min(locals_)),
        maximum=float(np.max(locals_)),
        mean_served=float(np.mean([c.served_accuracy for c in last.clients])),
        curve=[
            (r.round_index, r.mean_local_accuracy, r.mean_served_accuracy) for r in reports
        ],
    )


@dataclass
class CostLedger:
    """Per-round, per-client uplink/downlink bit counts for one experiment."""

    bits_per_scalar: int = BITS_PER_SCALAR
    bits_per_mask_position: int = BITS_PER_MASK_POSITION
    rounds: list[dict[int, tuple[int, int]]] = field(default_factory=list)

    def record_round(self, entries: dict[int, tuple[int, int]]) -> None:
        for cid, (up, down) in entries.items():
            if up < 0 or down < 0:
                raise ValueError(f"negative bit count for client {cid}")
        self.rounds.append(dict(entries))

    def total_uplink_bits(self) -> int:
        return sum(up for rnd in self.rounds for up, _ in rnd.values())

    def total_downlink_bits(self) -> int:
        return sum(down for rnd in self.rounds for _, down in rnd.values())

    def total_bits(self) -> int:
        return self.total_uplink_bits() + self.total_downlink_bits()

    def total_bytes(self) -> float:
        return self.total_bits() / 8

    def client_total_bits(self, client_id: int) -> int:
        return sum(sum(rnd[client_id]) for rnd in self.rounds if client_id in rnd)

    def to_json_dict(self) -> dict:
        return {
            "bits_per_scalar": self.bits_per_scalar,
            "bits_per_mask_position": self.bits_per_mask_position,
            "total_uplink_bits": self.total_uplink_bits(),
            "total_downlink_bits": self.total_downlink_bits(),
            "total_bytes": self.total_bytes(),
            "rounds": [
                {str(cid): [up, down] for cid, (up, down) in rnd.items()} for rnd in self.rounds
            ],
        }
