"""Sybil provisioning, target-model acquisition and poison crafting.

The malicious side never touches the training procedure of other clients.
It only decides what data its sybils train on: images of class ``y_adv``
nudged so that their parameter gradient at the current global model points
along ``w_r - w_tar``. An SGD step on them then moves the model toward the
label-flipped target.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine
from .data import LabeledDataset, flip_labels, select_class
from .models import init_params
from .training import TrainParams, client_rng, local_train, STREAM_OFFLINE

SCHEMES = ("online-local", "online-global", "offline")
METHODS = ("ours", "fcm", "lm")


class DegenerateDirectionError(ValueError):
    """Cosine undefined: the target direction or the poison gradient has zero norm."""


@dataclass(frozen=True)
class AttackConfig:
    y_tar: int = 1
    y_adv: int = 7
    m_pct: float = 40.0
    v: int = 5
    T: int = 300
    poison_lr: float = 1.0
    epsilon: float = math.inf
    poison_count: int = 32
    scheme: str = "online-global"
    r_pre: int = 20
    window: tuple = (0, 0)  # half-open round range [start, stop)
    method: str = "ours"
    reverse_direction: bool = False
    sybil_weight: float = 1.0
    fcm_beta: Optional[float] = None

    def __post_init__(self):
        if self.y_tar == self.y_adv:
            raise ValueError("y_tar and y_adv must differ")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not self.poison_lr > 0:
            raise ValueError("poison_lr must be > 0")
        if not 0 <= self.m_pct <= 100:
            raise ValueError("m_pct must lie in [0, 100]")
        if self.v < 0:
            raise ValueError("v must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0 (use inf for unbounded)")
        if self.poison_count < 1:
            raise ValueError("poison_count must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.r_pre < 0:
            raise ValueError("r_pre must be >= 0")
        if not self.sybil_weight > 0:
            raise ValueError("sybil_weight must be > 0")

    def in_window(self, round_: int) -> bool:
        return self.window[0] <= round_ < self.window[1]


def malicious_count(n: int, m_pct: float) -> int:
    m = n * m_pct / 100.0
    if abs(m - round(m)) > 1e-9:
        raise ValueError(f"{m_pct}% of {n} clients is not a whole number; give the malicious count explicitly")
    return int(round(m))


def sybil_count(n: int, m_pct: float, v: int) -> int:
    """Total sybils: N * m% * v."""
    if n < 0 or m_pct < 0 or v < 0:
        raise ValueError("inputs must be nonnegative")
    return malicious_count(n, m_pct) * v


# --- target models -----------------------------------------------------------

def acquire_target_local(model, w_r, dataset, config: AttackConfig, train: TrainParams, rng):
    """Fake local training on the label-flipped copy of the client's data, started from w_r."""
    if len(dataset) == 0:
        raise ValueError("malicious client has no data")
    return local_train(model, flip_labels(dataset, config.y_tar, config.y_adv), w_r, train, rng)


def acquire_target_global(model, w_r, datasets, config: AttackConfig, train: TrainParams, rngs):
    """Unweighted mean of every malicious client's flipped-data model."""
    if len(datasets) == 0:
        raise ValueError("online-global acquisition needs at least one malicious client")
    models = [acquire_target_local(model, w_r, d, config, train, r) for d, r in zip(datasets, rngs)]
    return np.mean(models, axis=0)


def acquire_target_offline(model, datasets, r_pre, config: AttackConfig, train: TrainParams, seed):
    """R_pre rounds of flipped-label FedAvg among malicious clients only, from a fresh init."""
    if len(datasets) == 0:
        raise ValueError("offline acquisition needs at least one malicious client")
    w = init_params(model, seed)
    for r in range(r_pre):
        rngs = [client_rng(seed, i, r, STREAM_OFFLINE) for i in range(len(datasets))]
        w = acquire_target_global(model, w, datasets, config, train, rngs)
    return w


def lm_target(model, w_r, dataset, config: AttackConfig, train: TrainParams, rng):
    """Local-method target: train only on the client's y_tar samples relabelled y_adv."""
    targets = select_class(dataset, config.y_tar)
    if len(targets) == 0:
        raise ValueError("client holds no target-class samples")
    return acquire_target_local(model, w_r, targets, config, train, rng)


# --- gradient matching --------------------------------------------------------

def _direction(w_r, w_tar, reverse=False):
    d = np.asarray(w_r, dtype=np.float64) - np.asarray(w_tar, dtype=np.float64)
    return -d if reverse else d


def cosine_loss(d, g):
    """1 - cos(d, g) and its gradient w.r.t. g."""
    nd, ng = np.linalg.norm(d), np.linalg.norm(g)
    if nd == 0:
        raise DegenerateDirectionError("target direction has zero norm (w_r == w_tar?)")
    if ng == 0:
        raise DegenerateDirectionError("poison gradient has zero norm (saturated model?)")
    cos = float(d @ g) / (nd * ng)
    dcos = d / (nd * ng) - cos * g / (ng * ng)
    return min(max(1.0 - cos, 0.0), 2.0), -dcos


def matching_loss(delta, w_r, w_tar, model, images, labels, reverse=False) -> float:
    """1 - cos(w_r - w_tar, summed parameter gradient at the perturbed images)."""
    g = engine.grad_params(model, w_r, np.asarray(images) + delta, labels)
    return cosine_loss(_direction(w_r, w_tar, reverse), g)[0]


def matching_loss_grad(delta, w_r, w_tar, model, images, labels, reverse=False):
    """(B, dB/dDelta)."""
    x = np.asarray(images) + delta
    g = engine.grad_params(model, w_r, x, labels)
    value, dg = cosine_loss(_direction(w_r, w_tar, reverse), g)
    return value, engine.mixed_grad_delta(model, w_r, x, labels, np.zeros_like(x), dg)


@dataclass
class PoisonBatch:
    images: np.ndarray  # unperturbed base images
    labels: np.ndarray
    delta: np.ndarray
    trace: list = field(default_factory=list)
    num_classes: int = 10

    @property
    def poisoned(self) -> np.ndarray:
        return self.images + self.delta

    def __len__(self):
        return len(self.labels)

    def dataset(self) -> LabeledDataset:
        return LabeledDataset(self.poisoned, self.labels, self.num_classes)


def _pick(base: LabeledDataset, count: int, rng) -> LabeledDataset:
    if len(base) <= count:
        return base
    return base.subset(np.sort(rng.choice(len(base), size=count, replace=False)))


def _project(delta, images, epsilon):
    if math.isfinite(epsilon):
        delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(images + delta, 0.0, 1.0) - images


def generate_poison(base: LabeledDataset, w_r, w_tar, model, config: AttackConfig, rng=None) -> Optional[PoisonBatch]:
    """Perturb up to ``poison_count`` base images by T steps of descent on the matching loss.

    Returns None when the client has no base samples (its sybils sit out).
    The trace holds B before every step and after the last one.
    """
    if len(base) == 0:
        return None
    rng = np.random.default_rng(0) if rng is None else rng
    picked = _pick(base, config.poison_count, rng)
    x, y = picked.images, picked.labels
    delta = np.zeros_like(x)
    trace = []
    for _ in range(config.T):
        value, grad = matching_loss_grad(delta, w_r, w_tar, model, x, y, config.reverse_direction)
        trace.append(value)
        delta = _project(delta - config.poison_lr * grad, x, config.epsilon)
    trace.append(matching_loss(delta, w_r, w_tar, model, x, y, config.reverse_direction))
    return PoisonBatch(x, y, delta, trace, base.num_classes)


def lm_poison(base: LabeledDataset, w_r, client_data: LabeledDataset, model, config: AttackConfig,
              train: TrainParams, rng_target, rng_poison=None) -> Optional[PoisonBatch]:
    """Same crafting loop, but aimed at the target-class-only local model."""
    if len(base) == 0:
        return None
    w_tar = lm_target(model, w_r, client_data, config, train, rng_target)
    return generate_poison(base, w_r, w_tar, model, config, rng_poison)


def fcm_beta(model) -> float:
    feat = model.shapes[model.penultimate_index()]
    return 0.25 * (float(np.prod(feat)) / float(np.prod(model.input_shape))) ** 2


def fcm_poison(base: LabeledDataset, target_image, w_r, model, config: AttackConfig, rng=None,
               beta=None) -> Optional[PoisonBatch]:
    """Feature collision: forward-backward splitting on ||phi(x') - phi(t)||^2 + beta ||x' - b||^2.

    The trace records the mean feature distance ||phi(x') - phi(t)||.
    """
    if len(base) == 0:
        return None
    rng = np.random.default_rng(0) if rng is None else rng
    beta = (config.fcm_beta if config.fcm_beta is not None else fcm_beta(model)) if beta is None else beta
    picked = _pick(base, config.poison_count, rng)
    b, y = picked.images, picked.labels
    phi_t = engine.features(model, w_r, np.asarray(target_image)[None])[0]
    lr = config.poison_lr
    x = b.copy()
    trace = []
    for _ in range(config.T):
        phi = engine.features(model, w_r, x)
        trace.append(float(np.mean(np.linalg.norm(phi - phi_t, axis=1))))
        _, grad = engine.feature_vjp(model, w_r, x, 2.0 * (phi - phi_t))
        x_hat = x - lr * grad
        x = (x_hat + lr * beta * b) / (1.0 + lr * beta)
        x = b + _project(x - b, b, config.epsilon)
    phi = engine.features(model, w_r, x)
    trace.append(float(np.mean(np.linalg.norm(phi - phi_t, axis=1))))
    return PoisonBatch(b, y, x - b, trace, base.num_classes)


# --- container ---------------------------------------------------------------
# little-endian: b"PSNB" | u32 version | u32 ndim | u32 dims[ndim] (dims[0] = count)
# | u32 trace_len | u32 num_classes | f64 base[...] | f64 delta[...] | i64 labels[count]
# | f64 trace[trace_len]

_MAGIC = b"PSNB"


def save_poison(batch: PoisonBatch, path):
    shape = batch.images.shape
    head = _MAGIC + struct.pack(f"<II{len(shape)}III", 1, len(shape), *shape, len(batch.trace), batch.num_classes)
    body = (np.ascontiguousarray(batch.images, "<f8").tobytes()
            + np.ascontiguousarray(batch.delta, "<f8").tobytes()
            + np.ascontiguousarray(batch.labels, "<i8").tobytes()
            + np.asarray(batch.trace, "<f8").tobytes())
    Path(path).write_bytes(head + body)


def load_poison(path) -> PoisonBatch:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a poison container")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    trace_len, num_classes = struct.unpack_from("<II", raw, off)
    off += 8
    size = int(np.prod(shape))
    need = off + 8 * (2 * size + shape[0] + trace_len)
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    images = np.frombuffer(raw, "<f8", size, off).reshape(shape)
    off += 8 * size
    delta = np.frombuffer(raw, "<f8", size, off).reshape(shape)
    off += 8 * size
    labels = np.frombuffer(raw, "<i8", shape[0], off)
    off += 8 * shape[0]
    trace = np.frombuffer(raw, "<f8", trace_len, off).tolist()
    return PoisonBatch(images.astype(np.float64), labels.astype(np.int64), delta.astype(np.float64), trace, num_classes)
