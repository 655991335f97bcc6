"""Named parameter layout for encoder, decoder and fusion layers.

Names are dotted paths (``decoder.1.pgca.alpha_attn.l0``); anything under a
``.pgca.`` segment belongs to the fusion layers and is the only thing stage 2
trains.
"""

from collections import OrderedDict

import numpy as np

from pgca.core.attention import AttentionParams
from pgca.core.errors import ConfigError, DimensionError
from pgca.core.rng import make_rng
from pgca.core.tensor import Tensor

FUSION_SEGMENT = ".pgca."
_ATTN_FIELDS = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")


def is_fusion_param(name):
    return FUSION_SEGMENT in name


def _attention_shapes(prefix, d):
    shapes = OrderedDict()
    for field in ("w_q", "w_k", "w_v", "w_o"):
        shapes[f"{prefix}.{field}"] = ((d, d), "weight")
    for field in ("b_q", "b_k", "b_v", "b_o"):
        shapes[f"{prefix}.{field}"] = ((d,), "bias")
    return shapes


def _norm_shapes(prefix, d):
    return OrderedDict([(f"{prefix}.g", ((d,), "gamma")), (f"{prefix}.b", ((d,), "bias"))])


def _mlp_shapes(prefix, d, d_ff):
    return OrderedDict(
        [
            (f"{prefix}.w1", ((d, d_ff), "weight")),
            (f"{prefix}.b1", ((d_ff,), "bias")),
            (f"{prefix}.w2", ((d_ff, d), "weight")),
            (f"{prefix}.b2", ((d,), "bias")),
        ]
    )


def fusion_shapes(config, block):
    d, mode = config.d, config.fusion_mode
    prefix = f"decoder.{block}.pgca"
    shapes = OrderedDict()
    if mode in ("full_pgca", "no_tanh", "sequential"):
        for lang in config.aux_languages:
            shapes.update(_attention_shapes(f"{prefix}.attn.{lang}", d))
    elif mode == "shared":
        shapes.update(_attention_shapes(f"{prefix}.attn.shared", d))
    elif mode == "addition":
        for lang in config.aux_languages:
            shapes[f"{prefix}.pool.{lang}.w"] = ((d, d), "weight")
            shapes[f"{prefix}.pool.{lang}.b"] = ((d,), "bias")
    elif mode == "concatenation":
        shapes[f"{prefix}.concat.w"] = ((config.n_aux * d, d), "weight")
        shapes[f"{prefix}.concat.b"] = ((d,), "bias")
    if config.is_gated:
        for lang in config.aux_languages:
            shapes[f"{prefix}.alpha_attn.{lang}"] = ((), "gate")
        shapes[f"{prefix}.alpha_fnn"] = ((), "gate")
        shapes.update(_mlp_shapes(f"{prefix}.fnn", d, config.d_ff))
    return shapes


def parameter_shapes(config):
    """Ordered name -> (shape, init kind) for the whole model."""
    d, d_ff = config.d, config.d_ff
    shapes = OrderedDict()
    shapes["encoder.conv.w"] = ((config.conv_kernel * config.n_features, d), "weight")
    shapes["encoder.conv.b"] = ((d,), "bias")
    for i in range(config.n_enc):
        shapes.update(_norm_shapes(f"encoder.{i}.ln1", d))
        shapes.update(_attention_shapes(f"encoder.{i}.attn", d))
        shapes.update(_norm_shapes(f"encoder.{i}.ln2", d))
        shapes.update(_mlp_shapes(f"encoder.{i}.mlp", d, d_ff))
    shapes.update(_norm_shapes("encoder.ln", d))

    shapes["decoder.embed"] = ((config.vocab_tgt, d), "weight")
    for i in range(config.n_dec):
        if config.has_fusion:
            shapes.update(fusion_shapes(config, i))
        shapes.update(_norm_shapes(f"decoder.{i}.ln1", d))
        shapes.update(_attention_shapes(f"decoder.{i}.self_attn", d))
        shapes.update(_norm_shapes(f"decoder.{i}.ln2", d))
        shapes.update(_attention_shapes(f"decoder.{i}.cross_attn", d))
        shapes.update(_norm_shapes(f"decoder.{i}.ln3", d))
        shapes.update(_mlp_shapes(f"decoder.{i}.mlp", d, d_ff))
    shapes.update(_norm_shapes("decoder.ln", d))
    shapes["decoder.out.w"] = ((d, config.vocab_tgt), "weight")
    shapes["decoder.out.b"] = ((config.vocab_tgt,), "bias")
    return shapes


def _initial_value(name, shape, kind, std, seed):
    if kind == "weight":
        # One stream per name: adding fusion layers never shifts the
        # baseline's initial weights.
        return make_rng(seed, "init", name).normal(0.0, std, size=shape)
    if kind == "gamma":
        return np.ones(shape)
    return np.zeros(shape)


class ParameterStore:
    def __init__(self, tensors=None):
        self._tensors = OrderedDict(tensors or ())

    @classmethod
    def initialise(cls, config, seed, names=None):
        store = cls()
        for name, (shape, kind) in parameter_shapes(config).items():
            if names is not None and name not in names:
                continue
            value = _initial_value(name, shape, kind, config.init_std, seed)
            store._tensors[name] = Tensor(value, requires_grad=True, name=name)
        return store

    @classmethod
    def from_arrays(cls, arrays):
        return cls((name, Tensor(value, requires_grad=True, name=name)) for name, value in arrays.items())

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return list(self._tensors.items())

    def add(self, name, tensor):
        if name in self._tensors:
            raise ConfigError(f"parameter {name!r} already exists")
        self._tensors[name] = tensor

    def attention(self, prefix, n_heads):
        return AttentionParams(n_heads=n_heads, **{field: self[f"{prefix}.{field}"] for field in _ATTN_FIELDS})

    def set_trainable(self, frozen):
        frozen = set(frozen)
        for name, tensor in self._tensors.items():
            tensor.requires_grad = name not in frozen

    def trainable(self):
        return [(name, t) for name, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.grad = None

    def arrays(self):
        return OrderedDict((name, tensor.data.copy()) for name, tensor in self._tensors.items())

    def copy(self):
        store = ParameterStore.from_arrays(self.arrays())
        for name, tensor in self._tensors.items():
            store[name].requires_grad = tensor.requires_grad
        return store

    def assign(self, name, value):
        tensor = self[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != tensor.shape:
            raise DimensionError(f"cannot assign shape {value.shape} to {name!r} of shape {tensor.shape}")
        tensor.data[...] = value
