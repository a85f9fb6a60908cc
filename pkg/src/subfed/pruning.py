"""Subnetwork masks: magnitude pruning, BN-scale channel pruning, schedules.

A SparsityMask carries a bitmap for every learnable tensor plus an optional
per-conv-layer channel keep-set. The unstructured part governs only the
`covered` entries; channel removal propagates zeros over the channel's filter,
bias, BN scale/shift and the next conv layer's matching input slices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .engine import (
    LEARNABLE_ROLES,
    ROLE_BIAS,
    ROLE_BN_SCALE,
    ROLE_BN_SHIFT,
    ROLE_WEIGHT,
    ParamSet,
)

Key = tuple[str, str]


class MaskCongruenceError(ValueError):
    """Masks/params with mismatched entries or shapes."""


class MaskFormatError(ValueError):
    """Unreadable serialized mask."""


@dataclass
class SparsityMask:
    bits: dict[Key, np.ndarray]              # bool, one per learnable entry
    covered: tuple[Key, ...]                 # entries governed by the unstructured part
    channel_keep: dict[str, np.ndarray] | None = None  # conv layer -> bool per out-channel

    def congruent_with(self, other: "SparsityMask") -> bool:
        if list(self.bits.keys()) != list(other.bits.keys()):
            return False
        if any(self.bits[k].shape != other.bits[k].shape for k in self.bits):
            return False
        if (self.channel_keep is None) != (other.channel_keep is None):
            return False
        if self.channel_keep is not None:
            if list(self.channel_keep.keys()) != list(other.channel_keep.keys()):
                return False
            if any(
                self.channel_keep[n].shape != other.channel_keep[n].shape
                for n in self.channel_keep
            ):
                return False
        return True

    def bit_length(self) -> int:
        return sum(b.size for b in self.bits.values())

    def zero_count(self) -> int:
        return sum(int((~b).sum()) for b in self.bits.values())

    def sparsity(self) -> float:
        """Zeroed fraction of the whole learnable bitmap."""
        total = self.bit_length()
        return self.zero_count() / total if total else 0.0

    def covered_sparsity(self) -> float:
        """Zeroed fraction of the unstructured governed domain."""
        total = sum(self.bits[k].size for k in self.covered)
        if total == 0:
            return 0.0
        zeros = sum(int((~self.bits[k]).sum()) for k in self.covered)
        return zeros / total

    def channel_sparsity(self) -> float:
        if not self.channel_keep:
            return 0.0
        total = sum(k.size for k in self.channel_keep.values())
        kept = sum(int(k.sum()) for k in self.channel_keep.values())
        return (total - kept) / total if total else 0.0

    def copy(self) -> "SparsityMask":
        return SparsityMask(
            {k: v.copy() for k, v in self.bits.items()},
            self.covered,
            None
            if self.channel_keep is None
            else {n: v.copy() for n, v in self.channel_keep.items()},
        )


def _conv_layers(params: ParamSet) -> list[str]:
    return [k[0] for k, v in params.items() if k[1] == ROLE_WEIGHT and v.ndim == 4]


def full_coverage(params: ParamSet) -> tuple[Key, ...]:
    """All conv and dense weights/biases; BN parameters stay structural."""
    return tuple(k for k, _ in params.learnable_items() if k[1] in (ROLE_WEIGHT, ROLE_BIAS))


def fc_coverage(params: ParamSet) -> tuple[Key, ...]:
    """Weights/biases of fully connected layers only (hybrid unstructured domain)."""
    dense = {k[0] for k, v in params.items() if k[1] == ROLE_WEIGHT and v.ndim == 2}
    return tuple(
        k for k, _ in params.learnable_items()
        if k[0] in dense and k[1] in (ROLE_WEIGHT, ROLE_BIAS)
    )


def _ones_bits(params: ParamSet) -> dict[Key, np.ndarray]:
    return {k: np.ones(v.shape, dtype=bool) for k, v in params.learnable_items()}


def _propagate_channels(
    bits: dict[Key, np.ndarray], params: ParamSet, channel_keep: dict[str, np.ndarray]
) -> None:
    convs = _conv_layers(params)
    for i, layer in enumerate(convs):
        keep = channel_keep[layer]
        pruned = ~keep
        if not pruned.any():
            continue
        bits[(layer, ROLE_WEIGHT)][pruned] = False
        bits[(layer, ROLE_BIAS)][pruned] = False
        if (layer, ROLE_BN_SCALE) in bits:
            bits[(layer, ROLE_BN_SCALE)][pruned] = False
            bits[(layer, ROLE_BN_SHIFT)][pruned] = False
        if i + 1 < len(convs):
            nxt = (convs[i + 1], ROLE_WEIGHT)
            if params[nxt].shape[1] != keep.size:
                raise MaskCongruenceError(
                    f"{convs[i + 1]}: input channels {params[nxt].shape[1]} do not follow "
                    f"{layer} output channels {keep.size}"
                )
            bits[nxt][:, pruned] = False


def dense_mask(params: ParamSet, covered: Iterable[Key] | None = None,
               with_channels: bool = False) -> SparsityMask:
    """All-ones mask; starting point for every client."""
    covered = tuple(covered) if covered is not None else full_coverage(params)
    keep = None
    if with_channels:
        keep = {
            layer: np.ones(params[(layer, ROLE_BIAS)].size, dtype=bool)
            for layer in _conv_layers(params)
        }
    return SparsityMask(_ones_bits(params), covered, keep)


def derive_unstructured_mask(
    params: ParamSet, fraction: float, covered: Iterable[Key] | None = None
) -> SparsityMask:
    """Zero the lowest-|value| floor(fraction% of the dense covered domain) positions.

    The count is always taken against the dense size of the covered domain, not
    the currently unpruned count; ties break by ascending flat index.
    """
    if not 0 <= fraction < 100:
        raise ValueError(f"fraction must lie in [0, 100), got {fraction}")
    covered = tuple(covered) if covered is not None else full_coverage(params)
    for key in covered:
        if key not in params:
            raise MaskCongruenceError(f"covered entry {key} not in params")
    bits = _ones_bits(params)
    sizes = [params[k].size for k in covered]
    n_dense = int(sum(sizes))
    k = int(math.floor(fraction * n_dense / 100 + 1e-9))
    if k > 0:
        pooled = np.concatenate([np.abs(params[key].ravel()) for key in covered])
        order = np.argsort(pooled, kind="stable")
        flat = np.ones(n_dense, dtype=bool)
        flat[order[:k]] = False
        offset = 0
        for key, size in zip(covered, sizes):
            bits[key] = flat[offset:offset + size].reshape(params[key].shape)
            offset += size
    return SparsityMask(bits, covered, None)


def derive_channel_mask(params: ParamSet, fraction: float) -> SparsityMask:
    """Prune floor(fraction% of all conv channels), lowest |BN scale| first.

    Scales pool across every BN layer; ties break by (layer order, channel
    index); each conv layer always keeps at least one channel.
    """
    if not 0 <= fraction < 100:
        raise ValueError(f"fraction must lie in [0, 100), got {fraction}")
    convs = _conv_layers(params)
    bn_layers = [c for c in convs if (c, ROLE_BN_SCALE) in params]
    if not bn_layers:
        raise MaskCongruenceError("channel pruning needs at least one BN layer")
    channel_keep = {
        layer: np.ones(params[(layer, ROLE_BIAS)].size, dtype=bool) for layer in convs
    }
    scales = np.concatenate([np.abs(params[(c, ROLE_BN_SCALE)]) for c in bn_layers])
    owners = [
        (layer, idx)
        for layer in bn_layers
        for idx in range(params[(layer, ROLE_BN_SCALE)].size)
    ]
    total = scales.size
    k = int(math.floor(fraction * total / 100 + 1e-9))
    remaining = {layer: int(channel_keep[layer].sum()) for layer in bn_layers}
    pruned = 0
    for cand in np.argsort(scales, kind="stable"):
        if pruned >= k:
            break
        layer, idx = owners[cand]
        if remaining[layer] <= 1:
            continue  # every conv layer keeps a channel
        channel_keep[layer][idx] = False
        remaining[layer] -= 1
        pruned += 1
    bits = _ones_bits(params)
    _propagate_channels(bits, params, channel_keep)
    return SparsityMask(bits, (), channel_keep)


def combine_masks(channel_part: SparsityMask, unstructured_part: SparsityMask,
                  params: ParamSet) -> SparsityMask:
    """Hybrid composition: channel-induced zeros AND the unstructured bitmap."""
    if channel_part.channel_keep is None:
        raise MaskCongruenceError("first argument must carry a channel keep-set")
    bits = _ones_bits(params)
    _propagate_channels(bits, params, channel_part.channel_keep)
    for key in unstructured_part.covered:
        bits[key] &= unstructured_part.bits[key]
    return SparsityMask(
        bits,
        unstructured_part.covered,
        {n: v.copy() for n, v in channel_part.channel_keep.items()},
    )


def channel_component(mask: SparsityMask, params: ParamSet) -> SparsityMask:
    """The structured part of a (possibly combined) mask, rebuilt standalone."""
    if mask.channel_keep is None:
        raise MaskCongruenceError("mask has no channel part")
    bits = _ones_bits(params)
    _propagate_channels(bits, params, mask.channel_keep)
    return SparsityMask(bits, (), {n: v.copy() for n, v in mask.channel_keep.items()})


def unstructured_component(mask: SparsityMask, params: ParamSet) -> SparsityMask:
    """The unstructured part of a (possibly combined) mask, rebuilt standalone."""
    bits = _ones_bits(params)
    for key in mask.covered:
        bits[key] = mask.bits[key].copy()
    return SparsityMask(bits, mask.covered, None)


def mask_distance(a: SparsityMask, b: SparsityMask) -> float:
    """Hamming distance over the governed domain, normalized by its size.

    Unstructured masks compare their covered bitmaps; channel masks compare
    their keep-sets over the total channel count.
    """
    if a.covered or b.covered:
        if a.covered != b.covered:
            raise MaskCongruenceError("masks govern different unstructured domains")
        total = 0
        diff = 0
        for key in a.covered:
            if a.bits[key].shape != b.bits[key].shape:
                raise MaskCongruenceError(f"bitmap shapes differ at {key}")
            total += a.bits[key].size
            diff += int((a.bits[key] != b.bits[key]).sum())
        return diff / total
    if a.channel_keep is not None and b.channel_keep is not None:
        if list(a.channel_keep.keys()) != list(b.channel_keep.keys()):
            raise MaskCongruenceError("masks cover different conv layers")
        total = 0
        diff = 0
        for layer in a.channel_keep:
            if a.channel_keep[layer].shape != b.channel_keep[layer].shape:
                raise MaskCongruenceError(f"channel counts differ at {layer}")
            total += a.channel_keep[layer].size
            diff += int((a.channel_keep[layer] != b.channel_keep[layer]).sum())
        return diff / total
    raise MaskCongruenceError("masks govern no common domain")


def apply_mask(params: ParamSet, mask: SparsityMask) -> ParamSet:
    """Elementwise product; pruned positions (and pruned channels' running
    statistics) become exactly 0. Returns a new ParamSet."""
    entries = {}
    for key, value in params.items():
        if key[1] in LEARNABLE_ROLES:
            if key not in mask.bits or mask.bits[key].shape != value.shape:
                raise MaskCongruenceError(f"mask incongruent with params at {key}")
            entries[key] = value * mask.bits[key]
        elif mask.channel_keep is not None and key[0] in mask.channel_keep:
            entries[key] = value * mask.channel_keep[key[0]]
        else:
            entries[key] = value.copy()
    return ParamSet(entries)


# ---------------------------------------------------------------------------
# Pruning schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PruneSchedule:
    rate_unstructured: float = 10.0
    rate_structured: float = 10.0
    target_unstructured: float = 30.0
    target_structured: float = 0.0
    acc_threshold: float = 50.0
    eps_unstructured: float = 1e-4
    eps_structured: float = 0.05
    level_unstructured: float = 0.0
    level_structured: float = 0.0

    def __post_init__(self):
        for kind in ("unstructured", "structured"):
            target = getattr(self, f"target_{kind}")
            level = getattr(self, f"level_{kind}")
            if not 0 <= target < 100:
                raise ValueError(f"target_{kind} must lie in [0, 100), got {target}")
            if not 0 <= level <= target:
                raise ValueError(f"level_{kind}={level} outside [0, target={target}]")
            if getattr(self, f"rate_{kind}") < 0:
                raise ValueError(f"rate_{kind} must be non-negative")
            if getattr(self, f"eps_{kind}") < 0:
                raise ValueError(f"eps_{kind} must be non-negative")

    def level(self, kind: str) -> float:
        return getattr(self, f"level_{kind}")

    def target(self, kind: str) -> float:
        return getattr(self, f"target_{kind}")

    def rate(self, kind: str) -> float:
        return getattr(self, f"rate_{kind}")

    def eps(self, kind: str) -> float:
        return getattr(self, f"eps_{kind}")

    def next_fraction(self, kind: str) -> float:
        """The cumulative sparsity a prune event would move to (capped at target)."""
        return min(self.level(kind) + self.rate(kind), self.target(kind))


def should_prune(accuracy: float, schedule: PruneSchedule, delta: float, kind: str) -> bool:
    """Alg. gate: validation accuracy, target not reached, and mask drift >= eps."""
    if kind not in ("unstructured", "structured"):
        raise ValueError(f"kind must be 'unstructured' or 'structured', got {kind!r}")
    return (
        accuracy >= schedule.acc_threshold
        and schedule.level(kind) < schedule.target(kind)
        and delta >= schedule.eps(kind)
    )


def advance_schedule(schedule: PruneSchedule, kind: str) -> PruneSchedule:
    new_level = min(schedule.level(kind) + schedule.rate(kind), schedule.target(kind))
    return replace(schedule, **{f"level_{kind}": new_level})


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


def serialize_mask(mask: SparsityMask) -> bytes:
    """Header (layer-name, role, bit-length) + little-endian packed bitmaps."""
    header = {
        "entries": [[k[0], k[1], int(v.size)] for k, v in mask.bits.items()],
        "covered": [[k[0], k[1]] for k in mask.covered],
        "channels": None
        if mask.channel_keep is None
        else {n: [int(b) for b in v] for n, v in mask.channel_keep.items()},
    }
    head = json.dumps(header, sort_keys=True).encode()
    flat = np.concatenate([v.ravel() for v in mask.bits.values()]).astype(np.uint8)
    payload = np.packbits(flat, bitorder="little").tobytes()
    return len(head).to_bytes(4, "little") + head + payload


def deserialize_mask(blob: bytes, params: ParamSet) -> SparsityMask:
    """Rebuild a mask against a congruent ParamSet (shapes come from the params)."""
    if len(blob) < 4:
        raise MaskFormatError("mask blob shorter than its header length field")
    head_len = int.from_bytes(blob[:4], "little")
    if len(blob) < 4 + head_len:
        raise MaskFormatError("mask blob truncated inside the header")
    try:
        header = json.loads(blob[4:4 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MaskFormatError(f"unreadable mask header: {exc}") from exc
    total = sum(int(n) for _, _, n in header["entries"])
    unpacked = np.unpackbits(
        np.frombuffer(blob[4 + head_len:], dtype=np.uint8), bitorder="little"
    )
    if unpacked.size < total:
        raise MaskFormatError(f"mask payload holds {unpacked.size} bits, header says {total}")
    bits = {}
    offset = 0
    for layer, role, size in header["entries"]:
        key = (layer, role)
        if key not in params or params[key].size != size:
            raise MaskCongruenceError(f"serialized mask incongruent with params at {key}")
        bits[key] = unpacked[offset:offset + size].astype(bool).reshape(params[key].shape)
        offset += size
    covered = tuple((layer, role) for layer, role in header["covered"])
    channels = header["channels"]
    keep = None
    if channels is not None:
        keep = {layer: np.array(vals, dtype=bool) for layer, vals in channels.items()}
    return SparsityMask(bits, covered, keep)
