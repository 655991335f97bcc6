from dataclasses import dataclass

import numpy as np

from pgca.core import tensor as T


@dataclass
class FeedForwardParams:
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor

    @classmethod
    def from_store(cls, store, prefix):
        return cls(*(store[f"{prefix}.{field}"] for field in ("w1", "b1", "w2", "b2")))


def feed_forward(x, p):
    return T.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def linear(x, w, b=None):
    y = x @ w
    return y if b is None else y + b


def norm(x, store, prefix):
    return T.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def sinusoidal_positions(length, width):
    """Fixed (length, width) table: sin on even columns, cos on odd ones."""
    positions = np.arange(length)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: width // 2])
    return table
