"""Shared test utilities: tiny specs, finite-difference oracle, random masks."""

from __future__ import annotations

import numpy as np

from subfed import engine as E
from subfed.engine import ModelSpec, ParamSet
from subfed.pruning import SparsityMask, full_coverage


def tiny_dense_spec(in_features: int = 8, classes: int = 3) -> ModelSpec:
    return ModelSpec(
        "tiny-dense", (1, 1, in_features),
        (E.Flatten(), E.Dense(in_features, classes)),
    )


def random_small_spec(rng: np.random.Generator, force_bn: bool | None = None) -> ModelSpec:
    """A random spec exercising conv/BN/pool/relu/flatten/dense with < ~600 params."""
    c_in = int(rng.integers(1, 3))
    side = int(rng.choice([6, 8]))
    layers = []
    c1 = int(rng.integers(2, 4))
    k1 = int(rng.choice([2, 3]))
    bn = bool(rng.integers(0, 2)) if force_bn is None else force_bn
    layers.append(E.Conv(c_in, c1, k1, batch_norm=bn))
    h = side - k1 + 1
    if h % 2 == 0:
        layers.append(E.MaxPool(2))
        h //= 2
    layers.append(E.Relu())
    if h >= 3 and rng.integers(0, 2):
        c2 = int(rng.integers(2, 4))
        layers.append(E.Conv(c1, c2, 2, batch_norm=bool(rng.integers(0, 2))))
        h -= 1
        c1 = c2
        layers.append(E.Relu())
    layers.append(E.Flatten())
    flat = c1 * h * h
    classes = int(rng.integers(2, 5))
    hidden = int(rng.integers(3, 6))
    layers.append(E.Dense(flat, hidden))
    layers.append(E.Relu())
    layers.append(E.Dense(hidden, classes))
    return ModelSpec(f"rand-{rng.integers(1 << 30)}", (c_in, side, side), tuple(layers))


def finite_difference_grads(spec: ModelSpec, params: ParamSet, x: np.ndarray,
                            y: np.ndarray, h: float = 1e-3) -> ParamSet:
    """Central differences of the mean cross-entropy loss, entry by entry."""

    def loss_at() -> float:
        _, cache = E.forward(spec, params, x, "train")
        return E.backward(cache, y)[0]

    fd_entries = {}
    for key, arr in params.items():
        if key[1] not in E.LEARNABLE_ROLES:
            fd_entries[key] = np.zeros_like(arr)
            continue
        fd = np.zeros_like(arr)
        flat = arr.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * h)
        fd_entries[key] = fd
    return ParamSet(fd_entries)


def random_params_and_mask(rng: np.random.Generator, n_entries: int = 2,
                           max_size: int = 8) -> tuple[ParamSet, SparsityMask]:
    entries = {}
    for i in range(n_entries):
        size = int(rng.integers(1, max_size + 1))
        entries[(f"fc{i + 1}", "weight")] = rng.normal(size=size).astype(np.float32)
    params = ParamSet(entries)
    bits = {k: rng.integers(0, 2, size=v.shape).astype(bool) for k, v in params.items()}
    return params, SparsityMask(bits, full_coverage(params), None)


def train_briefly(spec, params, x, y, epochs=8, batch_size=16, lr=0.05, seed=0):
    opt = E.OptimizerState(lr, 0.5)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), batch_size):
            idx = order[s:s + batch_size]
            _, cache = E.forward(spec, params, x[idx], "train")
            _, grads = E.backward(cache, y[idx])
            E.sgd_step(params, grads, opt)
    return params
