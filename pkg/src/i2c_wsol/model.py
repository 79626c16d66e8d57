"""Small CAM-style classifier.

Three 3x3 conv+relu stages with a 2x2 max-pool after the first two give the
feature maps ``F`` at stride 4.  A bias-free 1x1 conv turns ``F`` into one
localization map per class, and global average pooling of those maps gives
the logits, so ``logits == GAP(class_maps)`` holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import engine as E
from .errors import ConfigError, InputError


PIXEL_MEAN = 0.5


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    num_classes: int = 8
    feature_channels: int = 32
    widths: tuple[int, int] = (16, 32)
    stride_total: int = 4

    def __post_init__(self):
        if self.stride_total != 4:
            raise ConfigError(f"the backbone downsamples by exactly 4, got stride_total={self.stride_total}")
        if self.input_size < 4 or self.input_size % self.stride_total:
            raise ConfigError(
                f"input_size {self.input_size} must be a positive multiple of stride_total {self.stride_total}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.feature_channels < 1 or len(self.widths) != 2 or min(self.widths) < 1:
            raise ConfigError(f"invalid channel layout: widths={self.widths}, D={self.feature_channels}")

    @property
    def map_size(self) -> int:
        return self.input_size // self.stride_total

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        w1, w2 = self.widths
        d, y = self.feature_channels, self.num_classes
        return {
            "conv1.weight": (w1, 3, 3, 3),
            "conv1.bias": (w1,),
            "conv2.weight": (w2, w1, 3, 3),
            "conv2.bias": (w2,),
            "conv3.weight": (d, w2, 3, 3),
            "conv3.bias": (d,),
            "classifier.weight": (y, d, 1, 1),
        }


class ModelParams(dict):
    """Ordered mapping of parameter name to leaf :class:`~i2c_wsol.engine.Tensor`."""

    def tensors(self) -> list[E.Tensor]:
        return list(self.values())


class ModelOutput(NamedTuple):
    features: E.Tensor
    class_maps: E.Tensor
    logits: E.Tensor


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """He-style uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; biases start at zero."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D4F444C]))
    params = ModelParams()
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = E.Tensor(data, requires_grad=True, name=name)
    return params


def forward(params: ModelParams, images, config: ModelConfig) -> ModelOutput:
    x = images if isinstance(images, E.Tensor) else E.Tensor(images)
    s = config.input_size
    if x.ndim != 4 or x.shape[1:] != (3, s, s):
        raise InputError(f"images must be [N,3,{s},{s}], got {x.shape}")
    x = E.Tensor(x.data - PIXEL_MEAN) if not x.requires_grad else E.sub(x, E.Tensor(PIXEL_MEAN))
    h = E.relu(E.bias_add(E.conv2d(x, params["conv1.weight"], pad=1), params["conv1.bias"]))
    h = E.maxpool2(h)
    h = E.relu(E.bias_add(E.conv2d(h, params["conv2.weight"], pad=1), params["conv2.bias"]))
    h = E.maxpool2(h)
    features = E.relu(E.bias_add(E.conv2d(h, params["conv3.weight"], pad=1), params["conv3.bias"]))
    class_maps = E.conv2d(features, params["classifier.weight"])
    logits = E.global_average_pool(class_maps)
    return ModelOutput(features, class_maps, logits)


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = config.param_shapes()
    if list(params) != list(expected):
        raise ConfigError(f"parameter names {list(params)} do not match model layout {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: checkpoint shape {params[name].shape} != config shape {shape}")
