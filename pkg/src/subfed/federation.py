"""Round protocol: client sampling, local train-and-prune updates, aggregation.

Algorithms: sub-fedavg-un (iterative unstructured pruning), sub-fedavg-hy
(channel pruning on convs + unstructured pruning on fc layers), fedavg, and
standalone. Aggregation averages each parameter only over the selected clients
whose mask retains it; positions kept by nobody keep the previous global value.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    LEARNABLE_ROLES,
    ModelSpec,
    OptimizerState,
    ParamSet,
    backward,
    evaluate_accuracy,
    forward,
    sgd_step,
)
from .metrics import BITS_PER_SCALAR, conv_flops
from .pruning import (
    PruneSchedule,
    SparsityMask,
    advance_schedule,
    apply_mask,
    channel_component,
    combine_masks,
    dense_mask,
    derive_channel_mask,
    derive_unstructured_mask,
    fc_coverage,
    full_coverage,
    mask_distance,
    should_prune,
    unstructured_component,
)

ALGORITHMS = ("sub-fedavg-un", "sub-fedavg-hy", "fedavg", "standalone")


class TrainingDivergedError(RuntimeError):
    def __init__(self, client_id: int, round_index: int):
        self.client_id = client_id
        self.round_index = round_index
        super().__init__(
            f"client {client_id} diverged (non-finite loss) in round {round_index}"
        )


@dataclass
class ClientState:
    client_id: int
    spec: ModelSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    params: ParamSet
    mask: SparsityMask
    schedule: PruneSchedule
    optimizer: OptimizerState
    theta0: ParamSet | None = None  # common init, carried through the protocol unused
    accuracy_history: list = field(default_factory=list)


@dataclass
class ServerState:
    spec: ModelSpec
    params: ParamSet
    client_ids: tuple[int, ...]
    sampling_rate: float = 1.0
    seed: int = 0
    round_index: int = 0


@dataclass
class ClientUpdateResult:
    client_id: int
    params: ParamSet
    mask: SparsityMask
    validation_accuracy: float
    local_accuracy: float
    delta_unstructured: float
    delta_structured: float
    pruned_unstructured: bool
    pruned_structured: bool
    uplink_bits: int
    downlink_bits: int


def make_client(
    client_id: int,
    spec: ModelSpec,
    theta0: ParamSet,
    x_train, y_train, x_val, y_val, x_eval, y_eval,
    schedule: PruneSchedule,
    learning_rate: float,
    momentum: float,
    hybrid: bool = False,
) -> ClientState:
    params = theta0.copy()
    if hybrid:
        mask = dense_mask(params, fc_coverage(params), with_channels=True)
    else:
        mask = dense_mask(params, full_coverage(params))
    return ClientState(
        client_id=client_id,
        spec=spec,
        x_train=x_train, y_train=y_train,
        x_val=x_val, y_val=y_val,
        x_eval=x_eval, y_eval=y_eval,
        params=params,
        mask=mask,
        schedule=schedule,
        optimizer=OptimizerState(learning_rate, momentum),
        theta0=theta0.copy(),
    )


def retained_scalar_count(params: ParamSet, mask: SparsityMask) -> int:
    """Scalars a client exchanges: kept learnables plus running statistics of
    kept channels."""
    total = 0
    for key, value in params.items():
        if key[1] in LEARNABLE_ROLES:
            total += int(mask.bits[key].sum())
        elif mask.channel_keep is not None and key[0] in mask.channel_keep:
            total += int(mask.channel_keep[key[0]].sum())
        else:
            total += value.size
    return total


def sample_clients(server: ServerState, round_index: int) -> list[int]:
    """Uniform sample without replacement of max(1, round(K*N)) client ids;
    deterministic in (seed, round)."""
    n = len(server.client_ids)
    if n == 0:
        raise ValueError("client registry is empty")
    m = min(n, max(1, round(server.sampling_rate * n)))
    rng = np.random.default_rng((server.seed, 9173, round_index))
    picks = rng.choice(n, size=m, replace=False)
    return sorted(server.client_ids[i] for i in picks)


def _candidates(params: ParamSet, client: ClientState, kind: str):
    sched = client.schedule
    frac_us = sched.next_fraction("unstructured")
    un = derive_unstructured_mask(params, frac_us, client.mask.covered)
    if kind == "hybrid":
        ch = derive_channel_mask(params, sched.next_fraction("structured"))
        return un, ch
    return un, None


def client_update(
    client: ClientState,
    theta_g: ParamSet,
    epochs: int,
    batch_size: int,
    *,
    rng: np.random.Generator,
    round_index: int = 0,
    kind: str = "unstructured",
    exchange: bool = True,
) -> ClientUpdateResult:
    """One local round: adopt the downloaded params through the client's own
    mask, train `epochs` epochs of masked SGD, derive candidate masks after the
    first and last epoch, and prune when the accuracy/target/drift gates pass.

    Mutates the ClientState (params, mask, schedule, history) and returns the
    result the client would upload.
    """
    if kind not in ("unstructured", "hybrid"):
        raise ValueError(f"kind must be 'unstructured' or 'hybrid', got {kind!r}")
    if epochs < 2:
        raise ValueError("client updates need epochs >= 2 (distinct first/last epoch)")
    spec = client.spec
    downlink_bits = (
        BITS_PER_SCALAR * retained_scalar_count(theta_g, client.mask) if exchange else 0
    )
    start = theta_g if exchange else client.params
    params = apply_mask(start, client.mask)

    opt = client.optimizer
    opt.reset()
    n = len(client.x_train)
    first = last = None
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            _, cache = forward(spec, params, client.x_train[idx], "train")
            loss, grads = backward(cache, client.y_train[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(client.client_id, round_index)
            sgd_step(params, grads, opt, client.mask)
        if epoch == 0:
            first = _candidates(params, client, kind)
        if epoch == epochs - 1:
            last = _candidates(params, client, kind)

    val_acc = evaluate_accuracy(spec, params, client.x_val, client.y_val)
    delta_us = mask_distance(first[0], last[0])
    delta_s = mask_distance(first[1], last[1]) if kind == "hybrid" else 0.0
    pruned_us = should_prune(val_acc, client.schedule, delta_us, "unstructured")
    pruned_s = (
        kind == "hybrid" and should_prune(val_acc, client.schedule, delta_s, "structured")
    )

    if kind == "unstructured":
        if pruned_us:
            client.mask = last[0]
            client.schedule = advance_schedule(client.schedule, "unstructured")
            params = apply_mask(params, client.mask)
    else:
        if pruned_us or pruned_s:
            ch_part = last[1] if pruned_s else channel_component(client.mask, params)
            fc_part = last[0] if pruned_us else unstructured_component(client.mask, params)
            client.mask = combine_masks(ch_part, fc_part, params)
            if pruned_s:
                client.schedule = advance_schedule(client.schedule, "structured")
            if pruned_us:
                client.schedule = advance_schedule(client.schedule, "unstructured")
            params = apply_mask(params, client.mask)

    local_acc = evaluate_accuracy(spec, params, client.x_eval, client.y_eval)
    client.params = params
    client.accuracy_history.append((round_index, val_acc, local_acc))

    mask_changed = pruned_us or pruned_s
    uplink_bits = 0
    if exchange:
        uplink_bits = BITS_PER_SCALAR * retained_scalar_count(params, client.mask)
        if mask_changed:
            uplink_bits += client.mask.bit_length()
    return ClientUpdateResult(
        client_id=client.client_id,
        params=params,
        mask=client.mask,
        validation_accuracy=val_acc,
        local_accuracy=local_acc,
        delta_unstructured=delta_us,
        delta_structured=delta_s,
        pruned_unstructured=pruned_us,
        pruned_structured=pruned_s,
        uplink_bits=uplink_bits,
        downlink_bits=downlink_bits,
    )


def client_update_unstructured(client, theta_g, epochs, batch_size, *, rng,
                               round_index=0, exchange=True) -> ClientUpdateResult:
    return client_update(
        client, theta_g, epochs, batch_size,
        rng=rng, round_index=round_index, kind="unstructured", exchange=exchange,
    )


def client_update_hybrid(client, theta_g, epochs, batch_size, *, rng,
                         round_index=0, exchange=True) -> ClientUpdateResult:
    return client_update(
        client, theta_g, epochs, batch_size,
        rng=rng, round_index=round_index, kind="hybrid", exchange=exchange,
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _keep_array(result: ClientUpdateResult, key, shape) -> np.ndarray:
    mask = result.mask
    if key[1] in LEARNABLE_ROLES:
        return mask.bits[key]
    if mask.channel_keep is not None and key[0] in mask.channel_keep:
        return mask.channel_keep[key[0]]
    return np.ones(shape, dtype=bool)


def _fold_mean(results, template: ParamSet, keeper, fallback: ParamSet | None,
               strict: bool) -> ParamSet:
    rs = sorted(results, key=lambda r: r.client_id)
    for r in rs:
        if not r.params.congruent_with(template):
            raise ValueError(f"client {r.client_id} params incongruent with the global model")
    out = {}
    n = len(rs)
    for key, ref in template.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        cnt = np.zeros(ref.shape, dtype=np.int64)
        for r in rs:  # ascending client-id: summation order is fixed
            keep = keeper(r, key, ref.shape)
            acc += r.params[key] * keep
            cnt += keep
        mean = (acc / np.maximum(cnt, 1)).astype(ref.dtype)
        kept = (cnt == n) if strict else (cnt > 0)
        prev = fallback[key] if fallback is not None else ref
        out[key] = np.where(kept, mean, prev)
    return ParamSet(out)


def aggregate_sub_fedavg(results, theta_g_prev: ParamSet,
                         mode: str = "per-position") -> ParamSet:
    """Per parameter position: mean over the selected clients whose mask keeps
    it; positions kept by nobody retain the previous global value. BN running
    statistics average over the keepers of the owning channel.

    mode="strict-intersection" averages only positions every selected client
    kept (comparison mode; degenerates at high sparsity).
    """
    if not results:
        raise ValueError("aggregate_sub_fedavg needs at least one client result")
    if mode not in ("per-position", "strict-intersection"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return _fold_mean(
        results, theta_g_prev, _keep_array, theta_g_prev, strict=(mode == "strict-intersection")
    )


def aggregate_fedavg(results) -> ParamSet:
    """Uniform elementwise mean over the selected clients (equal shard volumes)."""
    if not results:
        raise ValueError("aggregate_fedavg needs at least one client result")

    def keeper(_result, _key, shape):
        return np.ones(shape, dtype=bool)

    return _fold_mean(results, results[0].params, keeper, None, strict=False)


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------


@dataclass
class ClientRoundRecord:
    client_id: int
    validation_accuracy: float
    local_accuracy: float
    served_accuracy: float
    sparsity: float
    sparsity_unstructured: float
    sparsity_channel: float
    delta_unstructured: float
    delta_structured: float
    pruned_unstructured: bool
    pruned_structured: bool
    uplink_bits: int
    downlink_bits: int
    conv_flops: int


@dataclass
class RoundReport:
    round_index: int
    algorithm: str
    selected: list[int]
    clients: list[ClientRoundRecord]

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(c, attr) for c in self.clients]))

    @property
    def mean_local_accuracy(self) -> float:
        return self._mean("local_accuracy")

    @property
    def mean_served_accuracy(self) -> float:
        return self._mean("served_accuracy")

    @property
    def mean_sparsity_unstructured(self) -> float:
        return self._mean("sparsity_unstructured")

    @property
    def mean_sparsity_channel(self) -> float:
        return self._mean("sparsity_channel")

    @property
    def mean_sparsity(self) -> float:
        return self._mean("sparsity")

    @property
    def total_uplink_bits(self) -> int:
        return sum(c.uplink_bits for c in self.clients)

    @property
    def total_downlink_bits(self) -> int:
        return sum(c.downlink_bits for c in self.clients)

    @property
    def total_conv_flops(self) -> int:
        return sum(c.conv_flops for c in self.clients)

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "algorithm": self.algorithm,
            "selected": list(self.selected),
            "mean_local_accuracy": self.mean_local_accuracy,
            "mean_served_accuracy": self.mean_served_accuracy,
            "mean_sparsity_unstructured": self.mean_sparsity_unstructured,
            "mean_sparsity_channel": self.mean_sparsity_channel,
            "total_uplink_bits": self.total_uplink_bits,
            "total_downlink_bits": self.total_downlink_bits,
            "total_conv_flops": self.total_conv_flops,
            "clients": [
                {
                    "id": c.client_id,
                    "validation_accuracy": c.validation_accuracy,
                    "local_accuracy": c.local_accuracy,
                    "served_accuracy": c.served_accuracy,
                    "sparsity": c.sparsity,
                    "sparsity_unstructured": c.sparsity_unstructured,
                    "sparsity_channel": c.sparsity_channel,
                    "delta_unstructured": c.delta_unstructured,
                    "delta_structured": c.delta_structured,
                    "pruned_unstructured": c.pruned_unstructured,
                    "pruned_structured": c.pruned_structured,
                    "uplink_bits": c.uplink_bits,
                    "downlink_bits": c.downlink_bits,
                    "conv_flops": c.conv_flops,
                }
                for c in self.clients
            ],
        }


def run_round(
    server: ServerState,
    clients: dict[int, ClientState],
    algorithm: str,
    *,
    epochs: int = 5,
    batch_size: int = 10,
    parallelism: int = 1,
    aggregation_mode: str = "per-position",
) -> RoundReport:
    """sample -> local updates (possibly concurrent) -> aggregate -> report.

    Concurrent and serial execution produce identical reports: every client
    update only touches its own state and results fold in client-id order.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    round_index = server.round_index
    selected = sample_clients(server, round_index)
    kind = "hybrid" if algorithm == "sub-fedavg-hy" else "unstructured"
    exchange = algorithm != "standalone"

    def work(cid: int) -> ClientUpdateResult:
        rng = np.random.default_rng((server.seed, round_index, cid))
        return client_update(
            clients[cid], server.params, epochs, batch_size,
            rng=rng, round_index=round_index, kind=kind, exchange=exchange,
        )

    if parallelism > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(cid) for cid in selected]
    results.sort(key=lambda r: r.client_id)

    if exchange:
        if algorithm == "fedavg":
            server.params = aggregate_fedavg(results)
        else:
            server.params = aggregate_sub_fedavg(results, server.params, mode=aggregation_mode)
    server.round_index = round_index + 1

    rows = []
    for r in results:
        client = clients[r.client_id]
        if exchange:
            served = evaluate_accuracy(
                server.spec, apply_mask(server.params, client.mask),
                client.x_eval, client.y_eval,
            )
        else:
            served = r.local_accuracy
        rows.append(
            ClientRoundRecord(
                client_id=r.client_id,
                validation_accuracy=r.validation_accuracy,
                local_accuracy=r.local_accuracy,
                served_accuracy=served,
                sparsity=r.mask.sparsity(),
                sparsity_unstructured=r.mask.covered_sparsity(),
                sparsity_channel=r.mask.channel_sparsity(),
                delta_unstructured=r.delta_unstructured,
                delta_structured=r.delta_structured,
                pruned_unstructured=r.pruned_unstructured,
                pruned_structured=r.pruned_structured,
                uplink_bits=r.uplink_bits,
                downlink_bits=r.downlink_bits,
                conv_flops=conv_flops(server.spec, r.mask.channel_keep).current_total,
            )
        )
    return RoundReport(round_index, algorithm, selected, rows)
