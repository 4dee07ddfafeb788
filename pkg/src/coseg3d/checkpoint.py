"""Version-tagged plain-text checkpoints of named tensors.

One file holds a flat {name: array} mapping. Values are written with repr,
which round-trips float64 exactly; files stay diffable and need no binary
tooling. Layer activations ride along as tiny code tensors so an MLP can be
rebuilt without outside knowledge of its architecture.
"""

from __future__ import annotations

import os

import numpy as np

from .autodiff import Tensor
from .nn import Layer
from . import autodiff as ad

__all__ = [
    "FORMAT_TAG",
    "save_named",
    "load_named",
    "mlp_to_named",
    "mlp_from_named",
]

FORMAT_TAG = "coseg3d-tensors 1"

_ACT_CODES = {"none": 0.0, "relu": 1.0}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_named(path: str | os.PathLike, named: dict[str, Tensor | np.ndarray]) -> None:
    lines = [FORMAT_TAG]
    for name in sorted(named):
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"bad tensor name {name!r}")
        arr = named[name].data if isinstance(named[name], Tensor) else np.asarray(named[name], dtype=np.float64)
        shape = " ".join(str(s) for s in arr.shape)
        flat = " ".join(repr(float(v)) for v in arr.reshape(-1))
        lines.append(f"tensor {name} {shape}".rstrip())
        lines.append(flat)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_named(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise ValueError(f"{path}: not a {FORMAT_TAG!r} checkpoint")
    named: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "tensor" or len(head) < 2:
            raise ValueError(f"{path}: malformed header at line {i + 1}")
        if i + 1 >= len(lines):
            raise ValueError(f"{path}: header at line {i + 1} has no value line")
        name = head[1]
        shape = tuple(int(s) for s in head[2:])
        vals = np.array([float(v) for v in lines[i + 1].split()]) if np.prod(shape, dtype=int) else np.empty(0)
        if vals.size != np.prod(shape, dtype=int):
            raise ValueError(f"{path}: tensor {name}: {vals.size} values for shape {shape}")
        named[name] = vals.reshape(shape)
        i += 2
    return named


def mlp_to_named(layers, prefix: str) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}
    for j, layer in enumerate(layers):
        named[f"{prefix}{j}.weight"] = layer.weight.data
        named[f"{prefix}{j}.bias"] = layer.bias.data
        named[f"{prefix}{j}.act"] = np.asarray(_ACT_CODES[layer.activation])
    return named


def mlp_from_named(named: dict[str, np.ndarray], prefix: str) -> list[Layer]:
    layers = []
    j = 0
    while f"{prefix}{j}.weight" in named:
        layers.append(
            Layer(
                weight=ad.parameter(named[f"{prefix}{j}.weight"]),
                bias=ad.parameter(named[f"{prefix}{j}.bias"]),
                activation=_ACT_NAMES[float(named[f"{prefix}{j}.act"])],
            )
        )
        j += 1
    if not layers:
        raise ValueError(f"no layers under prefix {prefix!r}")
    orphans = [k for k in named if k.startswith(prefix) and not any(
        k == f"{prefix}{i}.{part}" for i in range(j) for part in ("weight", "bias", "act"))]
    if orphans:
        raise ValueError(f"unconsumed keys under prefix {prefix!r}: {sorted(orphans)}")
    return layers
