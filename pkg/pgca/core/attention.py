from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from pgca.core import tensor as T
from pgca.core.errors import AttentionError, DimensionError

# Disallowed logits get this offset instead of -inf so softmax stays finite;
# exp(-1e9) underflows to exactly 0, so masked weights are 0.
MASK_OFFSET = -1e9


@dataclass
class AttentionParams:
    """Projections for all heads at once: head i owns columns
    [i*d_k, (i+1)*d_k) of w_q/w_k/w_v and the matching rows of w_o."""

    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    w_o: T.Tensor
    n_heads: int
    b_q: Optional[T.Tensor] = None
    b_k: Optional[T.Tensor] = None
    b_v: Optional[T.Tensor] = None
    b_o: Optional[T.Tensor] = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_q.shape[1] % self.n_heads:
            raise DimensionError(f"projection width {self.w_q.shape[1]} not divisible by {self.n_heads} heads")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise DimensionError(f"{name} shape {getattr(self, name).shape} != w_q shape {self.w_q.shape}")
        if self.w_o.shape != (self.w_q.shape[1], d):
            raise DimensionError(f"w_o shape {self.w_o.shape} != {(self.w_q.shape[1], d)}")

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def d_k(self):
        return self.w_q.shape[1] // self.n_heads

    def tensors(self):
        return [t for t in (self.w_q, self.w_k, self.w_v, self.w_o, self.b_q, self.b_k, self.b_v, self.b_o) if t is not None]


class AttentionMask:
    """Boolean T_q x T_k matrix; True means the key may be attended."""

    def __init__(self, allowed):
        allowed = np.array(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise DimensionError(f"attention mask must be 2-D, got shape {allowed.shape}")
        empty = np.flatnonzero(~allowed.any(axis=1))
        if empty.size:
            raise AttentionError(f"query rows {empty.tolist()} have no allowed key")
        self.allowed = allowed
        self.allowed.setflags(write=False)

    @property
    def shape(self):
        return self.allowed.shape

    def offsets(self):
        return np.where(self.allowed, 0.0, MASK_OFFSET)


def causal_mask(t):
    if t < 1:
        raise AttentionError(f"causal mask needs length >= 1, got {t}")
    return AttentionMask(np.tril(np.ones((t, t), dtype=bool)))


class AttentionOutput(NamedTuple):
    out: T.Tensor
    weights: np.ndarray  # (h, T_q, T_k), read-only


def _project(x, w, b):
    y = x @ w
    return y if b is None else y + b


def _split_heads(x, n_heads):
    t, width = x.shape
    return T.transpose(T.reshape(x, (t, n_heads, width // n_heads)), (1, 0, 2))


def multi_head_attention(q_in, k_in, v_in, params, mask=None):
    d = params.d_model
    for label, x in (("query", q_in), ("key", k_in), ("value", v_in)):
        if x.ndim != 2 or x.shape[1] != d:
            raise DimensionError(f"{label} input shape {x.shape} does not have width {d}")
    if k_in.shape[0] != v_in.shape[0]:
        raise DimensionError(f"key length {k_in.shape[0]} != value length {v_in.shape[0]}")
    t_q, t_k = q_in.shape[0], k_in.shape[0]
    if mask is not None and mask.shape != (t_q, t_k):
        raise DimensionError(f"mask shape {mask.shape} != {(t_q, t_k)}")

    h = params.n_heads
    q = _split_heads(_project(q_in, params.w_q, params.b_q), h)
    k = _split_heads(_project(k_in, params.w_k, params.b_k), h)
    v = _split_heads(_project(v_in, params.w_v, params.b_v), h)

    scores = T.mul_const(q @ T.transpose(k), 1.0 / np.sqrt(params.d_k))
    if mask is not None:
        scores = T.add_const(scores, np.broadcast_to(mask.offsets(), scores.shape))
    weights = T.softmax(scores, axis=-1)

    context = T.transpose(weights @ v, (1, 0, 2))
    out = _project(T.reshape(context, (t_q, h * params.d_k)), params.w_o, params.b_o)

    exposed = weights.data.copy()
    exposed.setflags(write=False)
    return AttentionOutput(out, exposed)
