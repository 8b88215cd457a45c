"""Network architectures and the flat parameter layout.

Parameters are always carried as a single 1-D float64 array. A model's
``layout`` says which slice of that array belongs to which layer tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import NamedTuple, Sequence

import numpy as np

from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU, ShapeError

MODEL_NAMES = ("fc-mnist", "cnn-fmnist")


class ParamSlot(NamedTuple):
    layer_index: int
    role: str  # "weight" | "bias"
    shape: tuple
    offset: int

    @property
    def size(self):
        return prod(self.shape)


@dataclass(frozen=True)
class Model:
    layers: tuple
    input_shape: tuple
    num_classes: int
    layout: tuple = field(init=False, repr=False)
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        shapes = [tuple(self.input_shape)]
        for i, layer in enumerate(self.layers):
            shapes.append(layer.output_shape(shapes[-1], i))
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(len(self.layers) - 1,
                             f"final output {shapes[-1]} does not match {self.num_classes} classes")
        slots, offset = [], 0
        for i, layer in enumerate(self.layers):
            for role, shape in layer.param_shapes():
                slots.append(ParamSlot(i, role, tuple(shape), offset))
                offset += prod(shape)
        object.__setattr__(self, "layout", tuple(slots))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def num_params(self) -> int:
        if not self.layout:
            return 0
        last = self.layout[-1]
        return last.offset + last.size

    def unflatten(self, vec: np.ndarray) -> list[dict]:
        """Per-layer dicts of parameter views into ``vec`` (no copies)."""
        vec = np.asarray(vec)
        if vec.shape != (self.num_params,):
            raise ValueError(f"parameter vector has shape {vec.shape}, expected ({self.num_params},)")
        out = [dict() for _ in self.layers]
        for slot in self.layout:
            out[slot.layer_index][slot.role] = vec[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        return out

    def flatten(self, tensors: Sequence[dict]) -> np.ndarray:
        vec = np.empty(self.num_params)
        for slot in self.layout:
            arr = np.asarray(tensors[slot.layer_index][slot.role], dtype=np.float64)
            if arr.shape != slot.shape:
                raise ValueError(f"layer {slot.layer_index} {slot.role}: shape {arr.shape}, expected {slot.shape}")
            vec[slot.offset:slot.offset + slot.size] = arr.ravel()
        return vec

    def penultimate_index(self) -> int:
        """Number of leading layers whose output is the feature map before the last Dense."""
        for i in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[i], Dense):
                return i
        raise ValueError("model has no Dense layer")


def build_fc(sizes: Sequence[int]) -> Model:
    """Fully connected net; ReLU after every hidden layer, raw logits out."""
    sizes = list(sizes)
    if len(sizes) < 2 or any(int(s) != s or s <= 0 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(int(a), int(b)))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Model(tuple(layers), (sizes[0],), sizes[-1])


def build_cnn(input_shape=(1, 28, 28), num_classes: int = 10) -> Model:
    layers = (
        Conv2d(1, 6, 5), ReLU(), MaxPool2d(2),
        Conv2d(6, 16, 5), ReLU(), MaxPool2d(2),
        Flatten(),
        Dense(256, 120), ReLU(),
        Dense(120, 84), ReLU(),
        Dense(84, num_classes),
    )
    return Model(layers, tuple(input_shape), num_classes)


def build_model(name: str, input_shape, num_classes: int = 10) -> Model:
    """Build by config name. FC nets keep the 32-16-8 hidden widths for any input size."""
    if name == "fc-mnist":
        fc = build_fc([prod(input_shape), 32, 16, 8, num_classes])
        if len(input_shape) == 1:
            return fc
        return Model((Flatten(),) + fc.layers, tuple(input_shape), num_classes)
    if name == "cnn-fmnist":
        return build_cnn(tuple(input_shape), num_classes)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")


def init_params(model: Model, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(model.num_params)
    for slot in model.layout:
        if slot.role != "weight":
            continue
        fan_in, fan_out = model.layers[slot.layer_index].fan()
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        vec[slot.offset:slot.offset + slot.size] = rng.uniform(-limit, limit, slot.size)
    return vec


__all__ = ["Model", "ParamSlot", "build_fc", "build_cnn", "build_model", "init_params",
           "Conv2d", "Dense", "Flatten", "MaxPool2d", "ReLU", "MODEL_NAMES"]
