"""Fusion of auxiliary-language embeddings into the decoder stream.

Gated modes follow

    Y' = Y + sum_l g(alpha_attn[l]) * attn(Y, E_l, E_l)
    Z  = Y' + g(alpha_fnn) * FNN(Y')

with g = tanh (``no_tanh`` uses the raw coefficient). Every gate starts at
zero, so a fresh fusion layer is the identity. The pooled modes replace the
layer with a broadcast bias built from mean-pooled E_l.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pgca.core import tensor as T
from pgca.core.attention import multi_head_attention
from pgca.core.errors import DimensionError
from pgca.model.config import FUSION_MODES, GATED_MODES
from pgca.model.layers import FeedForwardParams, feed_forward, linear

logger = logging.getLogger(__name__)


@dataclass
class PgcaParams:
    mode: str
    languages: tuple
    branch_attn: list = field(default_factory=list)
    alpha_attn: list = field(default_factory=list)
    alpha_fnn: Optional[T.Tensor] = None
    fnn: Optional[FeedForwardParams] = None
    pool: list = field(default_factory=list)
    concat: Optional[tuple] = None

    @property
    def n_aux(self):
        return len(self.languages)

    @classmethod
    def from_store(cls, store, config, block):
        prefix = f"decoder.{block}.pgca"
        mode, langs = config.fusion_mode, tuple(config.aux_languages)
        p = cls(mode=mode, languages=langs)
        if mode in ("full_pgca", "no_tanh", "sequential"):
            p.branch_attn = [store.attention(f"{prefix}.attn.{lang}", config.n_heads) for lang in langs]
        elif mode == "shared":
            shared = store.attention(f"{prefix}.attn.shared", config.n_heads)
            p.branch_attn = [shared] * len(langs)
        elif mode == "addition":
            p.pool = [(store[f"{prefix}.pool.{lang}.w"], store[f"{prefix}.pool.{lang}.b"]) for lang in langs]
        elif mode == "concatenation":
            p.concat = (store[f"{prefix}.concat.w"], store[f"{prefix}.concat.b"])
        if mode in GATED_MODES:
            p.alpha_attn = [store[f"{prefix}.alpha_attn.{lang}"] for lang in langs]
            p.alpha_fnn = store[f"{prefix}.alpha_fnn"]
            p.fnn = FeedForwardParams.from_store(store, f"{prefix}.fnn")
        return p


def _check_inputs(y, aux, p):
    if len(aux) != p.n_aux:
        raise DimensionError(f"fusion expects {p.n_aux} auxiliary streams, got {len(aux)}")
    d = y.shape[-1]
    for lang, e in zip(p.languages, aux):
        if e.ndim != 2 or e.shape[1] != d:
            raise DimensionError(f"auxiliary stream {lang!r} has shape {e.shape}, expected width {d}")


def _gate(alpha, squash):
    return T.tanh(alpha) if squash else alpha


def _branch(y, e, attn, lang, trace):
    result = multi_head_attention(y, e, e, attn)
    if trace is not None:
        trace[lang] = result.weights
    return result.out


def _gated_fnn(y_prime, p, squash):
    return y_prime + T.scale(feed_forward(y_prime, p.fnn), _gate(p.alpha_fnn, squash))


def _parallel(y, aux, p, trace, squash=True):
    # Every branch reads the same Y.
    total = y
    for lang, e, attn, alpha in zip(p.languages, aux, p.branch_attn, p.alpha_attn):
        total = total + T.scale(_branch(y, e, attn, lang, trace), _gate(alpha, squash))
    return _gated_fnn(total, p, squash)


def _no_tanh(y, aux, p, trace):
    return _parallel(y, aux, p, trace, squash=False)


def _sequential(y, aux, p, trace):
    # Branch l reads the output of branch l-1, in configured language order.
    current = y
    for lang, e, attn, alpha in zip(p.languages, aux, p.branch_attn, p.alpha_attn):
        current = current + T.scale(_branch(current, e, attn, lang, trace), T.tanh(alpha))
    return _gated_fnn(current, p, True)


def _pooled(e):
    return T.mean(e, axis=0, keepdims=True)


def _addition(y, aux, p, trace):
    out = y
    for e, (w, b) in zip(aux, p.pool):
        out = out + linear(_pooled(e), w, b)
    return out


def _concatenation(y, aux, p, trace):
    w, b = p.concat
    return y + linear(T.concat([_pooled(e) for e in aux], axis=-1), w, b)


class FusionFactory:
    _registry = {
        "full_pgca": _parallel,
        "no_tanh": _no_tanh,
        "sequential": _sequential,
        "shared": _parallel,
        "addition": _addition,
        "concatenation": _concatenation,
    }

    @classmethod
    def get(cls, mode):
        forward = cls._registry.get(mode)
        if forward is None:
            raise ValueError(f"Unknown fusion mode: {mode!r} (expected one of {FUSION_MODES[:-1]})")
        return forward


def pgca_variant_forward(mode, y, aux, p, trace=None):
    forward = FusionFactory.get(mode)
    _check_inputs(y, aux, p)
    return forward(y, aux, p, trace)


def pgca_forward(y, aux, p, trace=None):
    return pgca_variant_forward("full_pgca", y, aux, p, trace)


def gate_table(store, config):
    """(block, lang) -> tanh(alpha_attn) and (block, "fnn") -> tanh(alpha_fnn)
    for gated modes; empty otherwise. Gates are input-independent."""
    table = {}
    if not config.is_gated:
        return table
    for block in range(config.n_dec):
        prefix = f"decoder.{block}.pgca"
        for lang in config.aux_languages:
            table[(block, lang)] = float(np.tanh(store[f"{prefix}.alpha_attn.{lang}"].data))
        table[(block, "fnn")] = float(np.tanh(store[f"{prefix}.alpha_fnn"].data))
    return table


def _gated_outputs(config, block):
    """(alpha name, names of the weights that scale the same branch's output).

    The layer is unchanged when a gate and the output projection it scales
    flip sign together, since g is odd. Shared attention ties every language
    to one projection, so only the FNN gate is free there."""
    prefix = f"decoder.{block}.pgca"
    pairs = []
    if config.fusion_mode in ("full_pgca", "no_tanh", "sequential"):
        for lang in config.aux_languages:
            pairs.append((f"{prefix}.alpha_attn.{lang}", (f"{prefix}.attn.{lang}.w_o", f"{prefix}.attn.{lang}.b_o")))
    pairs.append((f"{prefix}.alpha_fnn", (f"{prefix}.fnn.w2", f"{prefix}.fnn.b2")))
    return pairs


def orient_gates(store, config, opt_state=None):
    """Flips every negative gate to positive together with the projection it
    scales (and their first moments), leaving the model function unchanged.
    Afterwards a larger gate means a language contributes more. Returns the
    flipped gate names."""
    if not config.is_gated:
        return []
    flipped = []
    for block in range(config.n_dec):
        for alpha, outputs in _gated_outputs(config, block):
            if store[alpha].data < 0:
                for name in (alpha,) + outputs:
                    store[name].data *= -1.0
                    if opt_state is not None and name in opt_state.m:
                        opt_state.m[name] *= -1.0
                flipped.append(alpha)
    return flipped
