"""Layer specifications understood by the engine.

Layers are immutable descriptions only; all numerics live in
:mod:`sybilpoison.engine`.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod


class ShapeError(ValueError):
    """Input shape incompatible with a layer. ``layer_index`` names the layer."""

    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def param_shapes(self):
        return (("weight", (self.out_features, self.in_features)),
                ("bias", (self.out_features,)))

    def output_shape(self, shape, index=0):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(index, f"Dense expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def fan(self):
        return self.in_features, self.out_features


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 5

    def param_shapes(self):
        k = self.kernel
        return (("weight", (self.out_channels, self.in_channels, k, k)),
                ("bias", (self.out_channels,)))

    def output_shape(self, shape, index=0):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(index, f"Conv2d expects ({self.in_channels}, H, W), got {tuple(shape)}")
        _, h, w = shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(index, f"spatial size {h}x{w} smaller than kernel {self.kernel}")
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def fan(self):
        k2 = self.kernel * self.kernel
        return self.in_channels * k2, self.out_channels * k2


@dataclass(frozen=True)
class MaxPool2d:
    size: int = 2

    def param_shapes(self):
        return ()

    def output_shape(self, shape, index=0):
        if len(shape) != 3:
            raise ShapeError(index, f"MaxPool2d expects (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        if h % self.size or w % self.size:
            raise ShapeError(index, f"spatial size {h}x{w} not divisible by pool {self.size}")
        return (c, h // self.size, w // self.size)


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self):
        return ()

    def output_shape(self, shape, index=0):
        return tuple(shape)


@dataclass(frozen=True)
class Flatten:
    def param_shapes(self):
        return ()

    def output_shape(self, shape, index=0):
        return (prod(shape),)
