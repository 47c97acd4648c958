"""Small ReLU MLP with a hand-written reverse pass and an Adam optimiser."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .network import Layer, Network, dense


class MLP:
    """ReLU hidden layers, identity output. Parameters are float64 (W, b) pairs, W is (out, in)."""

    def __init__(self, params: list[list[np.ndarray]]):
        self.params = params

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0) -> "MLP":
        params = []
        n = len(sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = math.sqrt(2.0 / fan_in) * (out_scale if k == n - 1 else 1.0)
            params.append([rng.normal(0.0, std, size=(fan_out, fan_in)), np.zeros(fan_out)])
        return cls(params)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.params[0][0].shape[1],) + tuple(W.shape[0] for W, _ in self.params)

    def forward(self, x: np.ndarray, keep: bool = False):
        """Forward pass; ``keep`` stores activations for ``backward``.

        Without ``keep`` the arithmetic is exactly ``network.forward``'s, so an
        exported policy acts identically. With it, faster BLAS matmuls are used.
        """
        h = x
        cache = []
        last = len(self.params) - 1
        for k, (W, b) in enumerate(self.params):
            z = h @ W.T + b if keep else dense(h, W, b)
            if keep:
                cache.append((h, z))
            h = z if k == last else np.maximum(z, 0.0)
        return (h, cache) if keep else h

    def backward(self, cache, dout: np.ndarray) -> list[list[np.ndarray]]:
        grads = [None] * len(self.params)
        g = dout
        for k in range(len(self.params) - 1, -1, -1):
            h, z = cache[k]
            if k != len(self.params) - 1:
                g = g * (z > 0)
            W = self.params[k][0]
            grads[k] = [g.T @ h, g.sum(axis=0)]
            if k:
                g = g @ W
        return grads

    @staticmethod
    def relu_pattern(cache) -> list[np.ndarray]:
        return [z > 0 for _, z in cache[:-1]]

    def copy(self) -> "MLP":
        return MLP([[W.copy(), b.copy()] for W, b in self.params])

    def to_network(self, metadata=None) -> Network:
        n = len(self.params)
        layers = tuple(
            Layer(W.copy(), b.copy(), "identity" if k == n - 1 else "relu")
            for k, (W, b) in enumerate(self.params)
        )
        return Network(layers, metadata or {})

    @classmethod
    def from_network(cls, network: Network) -> "MLP":
        return cls([[layer.weights.copy(), layer.biases.copy()] for layer in network.layers])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in self.params)


def global_norm(grads_list) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for grads in grads_list for pair in grads for g in pair))


class Adam:
    def __init__(self, mlps: Sequence[MLP], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.mlps = list(mlps)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [[[np.zeros_like(p) for p in pair] for pair in mlp.params] for mlp in self.mlps]
        self.v = [[[np.zeros_like(p) for p in pair] for pair in mlp.params] for mlp in self.mlps]

    def step(self, grads_list) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for mlp, grads, ms, vs in zip(self.mlps, grads_list, self.m, self.v):
            for pair, gpair, mpair, vpair in zip(mlp.params, grads, ms, vs):
                for j in range(2):
                    g = gpair[j]
                    mpair[j] *= self.b1
                    mpair[j] += (1.0 - self.b1) * g
                    vpair[j] *= self.b2
                    vpair[j] += (1.0 - self.b2) * g * g
                    pair[j] -= self.lr * (mpair[j] / c1) / (np.sqrt(vpair[j] / c2) + self.eps)
