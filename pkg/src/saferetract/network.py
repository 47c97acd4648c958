"""Feedforward fully-connected networks and their ``.net.json`` file format."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


class NetworkFormatError(ValueError):
    """A network document is malformed; the message names the offending field."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        w = _frozen(self.weights)
        b = _frozen(self.biases)
        if w.ndim != 2:
            raise ValueError(f"weights must be a 2-D matrix, got shape {w.shape}")
        if b.ndim != 1 or b.size != w.shape[0]:
            raise ValueError(f"bias length {b.size} does not match {w.shape[0]} weight rows")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[Layer, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ValueError(
                    f"layer {k} expects {layers[k].in_dim} inputs but layer {k - 1} "
                    f"produces {layers[k - 1].out_dim}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("output layer activation must be identity")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence, metadata=None) -> "Network":
        """ReLU on every hidden layer, identity on the last."""
        n = len(weights)
        layers = [
            Layer(w, b, "identity" if k == n - 1 else "relu")
            for k, (w, b) in enumerate(zip(weights, biases))
        ]
        return cls(tuple(layers), metadata or {})

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.input_dim,) + tuple(layer.out_dim for layer in self.layers)

    def forward(self, x) -> np.ndarray:
        return forward(self, x)

    def argmax_action(self, x):
        return argmax_action(self, x)

    def equals(self, other: "Network") -> bool:
        """Bit-exact parameter and activation equality (metadata ignored)."""
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.layers, other.layers)
        )


_BLOCK = 64


def dense(h: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Affine map whose rows are bit-identical whatever the batch around them.

    A plain ``h @ W.T`` lets BLAS pick kernels by batch size (gemv for one
    row, gemm otherwise), which changes rounding. Here rows are zero-padded to
    whole blocks and every BLAS call sees the same (_BLOCK, in) x (in, out) shape.
    """
    lead, n_in = h.shape[:-1], h.shape[-1]
    rows = h.reshape(-1, n_in)
    n = len(rows)
    m = -(-n // _BLOCK) * _BLOCK
    if m != n:
        padded = np.zeros((m, n_in), dtype=rows.dtype)
        padded[:n] = rows
        rows = padded
    z = np.matmul(rows.reshape(-1, _BLOCK, n_in), weights.T).reshape(m, -1)[:n]
    return (z + biases).reshape(*lead, -1)


def forward(network: Network, x) -> np.ndarray:
    """Concrete evaluation. Accepts a single vector or a (n, input_dim) batch.

    Each row's result does not depend on the rest of the batch, so a point
    evaluated alone replays exactly what it produced inside a batch.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1:] != (network.input_dim,):
        raise ValueError(f"input has shape {h.shape}, network expects last dim {network.input_dim}")
    for layer in network.layers:
        h = dense(h, layer.weights, layer.biases)
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def argmax_action(network: Network, x):
    """Greedy action. np.argmax returns the first maximum, so ties go to the lowest index."""
    out = forward(network, x)
    a = np.argmax(out, axis=-1)
    return int(a) if np.ndim(a) == 0 else a


def random_network(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0, name: str = "random") -> Network:
    """He-style random initialisation; handy for tests and examples."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, scale * math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(rng.normal(0.0, 0.1 * scale, size=fan_out))
    return Network.from_arrays(weights, biases, {"name": name})


# -- serialisation --------------------------------------------------------------

def to_dict(network: Network) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_dim": network.input_dim,
        "output_dim": network.output_dim,
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
                "activation": layer.activation,
            }
            for layer in network.layers
        ],
        "metadata": dict(network.metadata),
    }


def from_dict(doc: Mapping) -> Network:
    if not isinstance(doc, Mapping):
        raise NetworkFormatError("document: expected a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise NetworkFormatError(f"format_version: expected {FORMAT_VERSION}, got {version!r}")
    for key in ("input_dim", "output_dim", "layers"):
        if key not in doc:
            raise NetworkFormatError(f"{key}: missing")
    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise NetworkFormatError("layers: expected a non-empty list")

    layers = []
    prev_out = doc["input_dim"]
    for k, raw in enumerate(raw_layers):
        where = f"layers[{k}]"
        act = raw.get("activation")
        if act not in ACTIVATIONS:
            raise NetworkFormatError(f"{where}.activation: unknown activation {act!r}")
        try:
            w = np.array(raw["weights"], dtype=np.float64)
            b = np.array(raw["biases"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"{where}: bad weights/biases ({exc})") from None
        if w.ndim != 2:
            raise NetworkFormatError(f"{where}.weights: expected a row-major matrix")
        if b.ndim != 1 or b.size != w.shape[0]:
            raise NetworkFormatError(f"{where}.biases: length {b.size} does not match {w.shape[0]} weight rows")
        if w.shape[1] != prev_out:
            raise NetworkFormatError(f"{where}.weights: expected {prev_out} columns, got {w.shape[1]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NetworkFormatError(f"{where}: non-finite parameter")
        layers.append(Layer(w, b, act))
        prev_out = w.shape[0]

    if prev_out != doc["output_dim"]:
        raise NetworkFormatError(f"output_dim: declared {doc['output_dim']}, last layer produces {prev_out}")
    if layers[-1].activation != "identity":
        raise NetworkFormatError(f"layers[{len(layers) - 1}].activation: output layer must be identity")
    return Network(tuple(layers), doc.get("metadata") or {})


def save(network: Network, path: str | os.PathLike) -> None:
    # json writes floats via repr(), which round-trips float64 exactly.
    with open(path, "w") as fh:
        json.dump(to_dict(network), fh, indent=1)
        fh.write("\n")


def load(path: str | os.PathLike) -> Network:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"document: invalid JSON ({exc})") from None
    return from_dict(doc)
