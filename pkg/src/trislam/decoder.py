"""Tiny MLP decoders (input -> 32 -> 32 -> out) with hand-derived gradients.

The SDF head is linear; the color head applies a sigmoid so channels stay
strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN = 32


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardCache:
    x: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    pre3: np.ndarray
    out: np.ndarray


class MLPDecoder:
    """Two ReLU hidden layers of 32 units; linear or sigmoid output head."""

    def __init__(self, in_dim: int, out_dim: int, sigmoid_output: bool, seed: int = 0):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.sigmoid_output = bool(sigmoid_output)
        rng = np.random.default_rng(seed)
        dims = [self.in_dim, HIDDEN, HIDDEN, self.out_dim]
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            # Kaiming-uniform fan-in scaling for the ReLU stack
            bound = np.sqrt(6.0 / d_in)
            self.weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
            self.biases.append(np.zeros(d_out))
        self.w_grads = [np.zeros_like(w) for w in self.weights]
        self.b_grads = [np.zeros_like(b) for b in self.biases]

    @staticmethod
    def sdf(in_dim: int, seed: int = 0) -> "MLPDecoder":
        return MLPDecoder(in_dim, 1, sigmoid_output=False, seed=seed)

    @staticmethod
    def color(in_dim: int, seed: int = 0) -> "MLPDecoder":
        return MLPDecoder(in_dim, 3, sigmoid_output=True, seed=seed)

    def named_params(self):
        for i, (w, g) in enumerate(zip(self.weights, self.w_grads)):
            yield f"w{i}", w, g
        for i, (b, g) in enumerate(zip(self.biases, self.b_grads)):
            yield f"b{i}", b, g

    def zero_grad(self):
        for g in self.w_grads + self.b_grads:
            g.fill(0.0)

    def forward(self, x: np.ndarray):
        """Returns (output (N, out_dim), cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"expected input of shape (N, {self.in_dim}), got {x.shape}"
            )
        pre1 = x @ self.weights[0].T + self.biases[0]
        h1 = np.maximum(pre1, 0.0)
        pre2 = h1 @ self.weights[1].T + self.biases[1]
        h2 = np.maximum(pre2, 0.0)
        pre3 = h2 @ self.weights[2].T + self.biases[2]
        out = sigmoid(pre3) if self.sigmoid_output else pre3
        return out, ForwardCache(x, pre1, h1, pre2, h2, pre3, out)

    def backward(self, cache: ForwardCache, upstream: np.ndarray,
                 accumulate: bool = True) -> np.ndarray:
        """Accumulate parameter gradients; returns gradient w.r.t. the input.

        ReLU subgradient at exactly zero is taken as zero.
        """
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != cache.out.shape:
            raise ValueError("upstream gradient shape mismatch")
        d3 = upstream
        if self.sigmoid_output:
            d3 = d3 * cache.out * (1.0 - cache.out)
        d_h2 = d3 @ self.weights[2]
        d2 = d_h2 * (cache.pre2 > 0)
        d_h1 = d2 @ self.weights[1]
        d1 = d_h1 * (cache.pre1 > 0)
        d_x = d1 @ self.weights[0]
        if accumulate:
            self.w_grads[2] += d3.T @ cache.h2
            self.b_grads[2] += d3.sum(axis=0)
            self.w_grads[1] += d2.T @ cache.h1
            self.b_grads[1] += d2.sum(axis=0)
            self.w_grads[0] += d1.T @ cache.x
            self.b_grads[0] += d1.sum(axis=0)
        return d_x
