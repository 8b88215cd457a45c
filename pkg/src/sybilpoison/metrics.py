"""Main-task, target-task and overall accuracy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    mta: float
    tta: Optional[float]
    gma: Optional[float]
    train_loss: float
    adv_loss: float
    accuracy: float = float("nan")

    def __post_init__(self):
        for name in ("mta", "tta", "gma"):
            val = getattr(self, name)
            if val is not None and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [0, 1]")


def target_metrics(predictions, labels, y_tar, y_adv):
    """(mta, tta) from predictions; tta is None without target-class samples."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    is_tar = labels == y_tar
    n_tar = int(is_tar.sum())
    tta = float(np.sum(predictions[is_tar] == y_adv)) / n_tar if n_tar else None
    n_rest = len(labels) - n_tar
    mta = float(np.sum(predictions[~is_tar] == labels[~is_tar])) / n_rest if n_rest else None
    return mta, tta


def evaluate(model, params, testset, y_tar, y_adv):
    """MTA over non-target samples and TTA (target samples predicted as y_adv)."""
    if len(testset) == 0:
        raise ValueError("empty test set")
    return target_metrics(engine.predict(model, params, testset.images), testset.labels, y_tar, y_adv)


def accuracy(model, params, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(engine.predict(model, params, dataset.images) == dataset.labels))


def mean_loss(model, params, images, labels, chunk=4096) -> float:
    total = 0.0
    for i in range(0, len(labels), chunk):
        loss, _ = engine.forward_loss(model, params, images[i:i + chunk], labels[i:i + chunk])
        total += loss * len(labels[i:i + chunk])
    return total / len(labels)


def adversarial_loss(model, params, testset, y_tar, y_adv) -> float:
    """Attacker's objective on held-out data: flipped targets plus correct non-targets, mean CE."""
    labels = np.where(testset.labels == y_tar, y_adv, testset.labels)
    return mean_loss(model, params, testset.images, labels)
