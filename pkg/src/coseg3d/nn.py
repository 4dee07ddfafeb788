"""Point-wise MLP layers on top of the autodiff ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Layer", "mlp_forward", "init_mlp", "mlp_params"]

_ACTIVATIONS = ("relu", "none")


@dataclass
class Layer:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor  # (d_out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_forward(x: Tensor, layers: list[Layer]) -> Tensor:
    """Affine-then-activation chain. Dimensions are checked before any work."""
    x = ad.as_tensor(x)
    width = x.data.shape[-1]
    for i, layer in enumerate(layers):
        w_in, w_out = layer.weight.data.shape
        if w_in != width:
            raise ValueError(f"mlp_forward: layer {i} expects width {w_in}, got {width}")
        if layer.bias.data.shape != (w_out,):
            raise ValueError(f"mlp_forward: layer {i} bias shape {layer.bias.data.shape}")
        width = w_out
    h = x
    for layer in layers:
        h = ad.add_bias(ad.matmul(h, layer.weight), layer.bias)
        if layer.activation == "relu":
            h = ad.relu(h)
    return h


def init_mlp(widths: list[int], rng: np.random.Generator,
             final_activation: str = "relu", gain: float = 1.0) -> list[Layer]:
    """He-initialized MLP with ReLU between layers.

    widths = [d_in, h1, ..., d_out]; the last layer takes final_activation.
    Biases get a small random offset rather than zeros: all-zero input rows
    (neighborhood centers in relative coordinates) would otherwise sit exactly
    on the ReLU kink, where gradient checks are meaningless.
    """
    layers = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        std = gain * np.sqrt(2.0 / fan_in)
        w = ad.parameter(rng.normal(0.0, std, size=(fan_in, fan_out)))
        b = ad.parameter(rng.normal(0.0, 0.01, size=fan_out))
        act = "relu" if i < len(widths) - 2 else final_activation
        layers.append(Layer(w, b, act))
    return layers


def mlp_params(layers: list[Layer]) -> list[Tensor]:
    out = []
    for layer in layers:
        out.append(layer.weight)
        out.append(layer.bias)
    return out
