"""Multilayer perceptron predictor with a flat float64 parameter vector."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

ACTIVATIONS = ("silu",)
DEFAULT_HIDDEN = (256, 256, 256, 256)


@dataclass
class ModelParams:
    """Weights stored row-major as (out, in) per layer, all weights first then all biases."""

    layer_sizes: list[int]
    values: np.ndarray
    activation: str = "silu"
    seed: int = 0

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (param_count(self.layer_sizes),):
            raise ValueError(f"expected {param_count(self.layer_sizes)} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameter values")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "ModelParams":
        return ModelParams(list(self.layer_sizes), self.values.copy(), self.activation, self.seed)


def param_count(layer_sizes) -> int:
    return int(np.sum([a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:])]))


def _layout(layer_sizes):
    """Slices into the flat vector: weights of every layer, then biases."""
    pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
    w_slices, b_slices, off = [], [], 0
    for a, b in pairs:
        w_slices.append((slice(off, off + a * b), (b, a)))
        off += a * b
    for _, b in pairs:
        b_slices.append(slice(off, off + b))
        off += b
    return w_slices, b_slices


def bind(params: ModelParams, values: np.ndarray | None = None):
    """Views ``[(W, b), ...]`` into ``values`` (defaults to ``params.values``)."""
    values = params.values if values is None else values
    w_slices, b_slices = _layout(params.layer_sizes)
    return [(values[ws].reshape(shape), values[bs]) for (ws, shape), bs in zip(w_slices, b_slices)]


def flatten(layers) -> np.ndarray:
    """Inverse of :func:`bind` for a list of (W, b) arrays."""
    return np.concatenate([np.ravel(W) for W, _ in layers] + [np.ravel(b) for _, b in layers])


def init_mlp(input_dim: int, hidden: list[int] | tuple, output_dim: int, seed: int) -> ModelParams:
    sizes = [int(input_dim), *[int(h) for h in hidden], int(output_dim)]
    if min(sizes) < 1:
        raise ValueError(f"layer dimensions must be >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-a, a, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(sizes, flatten(layers), "silu", seed)


def leaves_for(params: ModelParams, tape: Tape) -> list[tuple[Var, Var]]:
    return [(tape.leaf(W), tape.leaf(b)) for W, b in bind(params)]


def leaf_gradient(grads: list[np.ndarray]) -> np.ndarray:
    """Reassemble per-leaf gradients ``[gW0, gb0, gW1, gb1, ...]`` into flat order."""
    return flatten(list(zip(grads[0::2], grads[1::2])))


def forward(params: ModelParams, x, tape: Tape | None = None, leaves=None):
    """y_theta(x) for a single input (d,) or a batch (B, d).

    Without a tape this is plain numpy.  With a tape, pass ``leaves`` from
    :func:`leaves_for` to differentiate w.r.t. parameters; ``x`` may itself be
    a tape node.
    """
    xv = ad.value(x)
    if xv.shape[-1] != params.input_dim:
        raise ValueError(f"input has dim {xv.shape[-1]}, model expects {params.input_dim}")
    if tape is not None and leaves is None:
        leaves = leaves_for(params, tape)
    layers = leaves if tape is not None else bind(params)
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        h = ad.matvec(W, h) + b
        if i < last:
            h = ad.silu(h)
    return h


def save_checkpoint(params: ModelParams, path) -> Path:
    """Write ``<path>.json`` (layout) and ``<path>.f64`` (little-endian values)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    man, raw = path.with_suffix(".json"), path.with_suffix(".f64")
    meta = {"layer_sizes": params.layer_sizes, "activation": params.activation,
            "seed": int(params.seed), "values": raw.name}
    man.write_text(json.dumps(meta, indent=2) + "\n")
    params.values.astype("<f8").tofile(raw)
    return man


def load_checkpoint(path) -> ModelParams:
    man = Path(path).with_suffix(".json")
    meta = json.loads(man.read_text())
    values = np.fromfile(man.parent / meta["values"], dtype="<f8")
    return ModelParams(meta["layer_sizes"], values, meta["activation"], meta["seed"])
