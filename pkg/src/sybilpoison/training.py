"""Client-side SGD with momentum and per-client RNG keying."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine

# RNG stream tags; every random draw is keyed by (seed, client, round, stream)
STREAM_TRAIN = 0
STREAM_TARGET = 1
STREAM_POISON = 2
STREAM_SELECT = 3
STREAM_OFFLINE = 4


def client_rng(seed: int, client_id: int, round_: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(client_id), int(round_), int(stream)])


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def num_steps(n: int, train: TrainParams) -> int:
    """floor(n / b) * E with b = min(B, n): a set smaller than one batch is a single batch."""
    if n == 0:
        return 0
    b = min(train.batch_size, n)
    return (n // b) * train.epochs


def local_train(model, dataset, w_start, train: TrainParams, rng: np.random.Generator) -> np.ndarray:
    """Mini-batch SGD with heavy-ball momentum from ``w_start``; remainder batches are dropped.

    Velocity follows ``v <- mu*v + g; w <- w - lr*v`` with ``g`` the
    batch-mean gradient. ``w_start`` is never modified.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    w = np.array(w_start, dtype=np.float64, copy=True)
    if train.lr == 0 or train.epochs == 0:
        return w
    b = min(train.batch_size, n)
    velocity = np.zeros_like(w)
    for _ in range(train.epochs):
        order = rng.permutation(n)
        for k in range(n // b):
            idx = order[k * b:(k + 1) * b]
            g = engine.grad_params(model, w, dataset.images[idx], dataset.labels[idx]) / b
            velocity = train.momentum * velocity + g
            w -= train.lr * velocity
    return w
