"""Encoder-decoder recogniser with optional fusion layers.

Stage 1 trains the plain encoder-decoder. Stage 2 copies it, inserts one
fusion layer at the start of every decoder block and freezes everything
else.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from pgca.core import tensor as T
from pgca.core.attention import causal_mask, multi_head_attention
from pgca.core.errors import ConfigError, CorpusError, DimensionError
from pgca.model.config import ModelConfig
from pgca.model.fusion import PgcaParams, pgca_variant_forward
from pgca.model.layers import FeedForwardParams, feed_forward, linear, norm, sinusoidal_positions
from pgca.model.params import ParameterStore, is_fusion_param, parameter_shapes

logger = logging.getLogger(__name__)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: ParameterStore
    stage: int
    frozen: tuple = ()
    opt_state: object = None
    step: int = 0
    meta: dict = field(default_factory=dict)

    def trainable_names(self):
        frozen = set(self.frozen)
        return [name for name in self.params.names() if name not in frozen]

    def copy(self):
        return replace(
            self,
            params=self.params.copy(),
            opt_state=None if self.opt_state is None else self.opt_state.copy(),
            meta=dict(self.meta),
        )


def freeze_plan(stage, config):
    """Names excluded from updates: nothing in stage 1, everything except the
    fusion layers in stage 2."""
    if stage == 1:
        return ()
    if stage == 2:
        return tuple(name for name in parameter_shapes(config) if not is_fusion_param(name))
    raise ValueError(f"Unknown training stage: {stage!r}")


def init_checkpoint(config, seed):
    config.validate(strict=True)
    if config.has_fusion:
        raise ConfigError(f"stage 1 trains without fusion, got fusion_mode={config.fusion_mode!r}")
    params = ParameterStore.initialise(config, seed)
    return ModelCheckpoint(config=config, params=params, stage=1, frozen=freeze_plan(1, config))


def extend_for_stage2(stage1, fusion_mode, languages, seed):
    """Stage-2 checkpoint: the stage-1 weights plus freshly initialised
    fusion layers (gates at zero), everything else frozen."""
    if stage1.stage != 1:
        raise ConfigError(f"stage 2 starts from a stage-1 checkpoint, got stage {stage1.stage}")
    config = stage1.config.with_fusion(fusion_mode, languages)
    config.validate(strict=True)
    if not config.has_fusion:
        raise ConfigError("stage 2 needs a fusion mode other than 'none'")

    fresh = ParameterStore.initialise(config, seed, names={n for n in parameter_shapes(config) if is_fusion_param(n)})
    params = ParameterStore()
    for name in parameter_shapes(config):
        source = fresh if is_fusion_param(name) else stage1.params
        params.add(name, T.Tensor(source[name].data, requires_grad=True, name=name))
    frozen = freeze_plan(2, config)
    params.set_trainable(frozen)
    meta = {"parent_step": stage1.step}
    return ModelCheckpoint(config=config, params=params, stage=2, frozen=frozen, meta=meta)


def _audio_tensor(x, config):
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if x.ndim != 2 or x.shape[1] != config.n_features:
        raise DimensionError(f"audio shape {x.shape} does not have {config.n_features} feature bins")
    if x.shape[0] > config.max_source_len:
        raise DimensionError(f"audio length {x.shape[0]} exceeds max_source_len={config.max_source_len}")
    return x


def _residual_attention(x, store, ln, attn, config, memory=None, mask=None):
    a = norm(x, store, ln)
    kv = a if memory is None else memory
    return x + multi_head_attention(a, kv, kv, store.attention(attn, config.n_heads), mask).out


def encode_audio(x, store, config):
    x = _audio_tensor(x, config)
    h = T.gelu(linear(T.unfold_time(x, config.conv_kernel), store["encoder.conv.w"], store["encoder.conv.b"]))
    h = T.add_const(h, sinusoidal_positions(h.shape[0], config.d))
    for i in range(config.n_enc):
        h = _residual_attention(h, store, f"encoder.{i}.ln1", f"encoder.{i}.attn", config)
        h = h + feed_forward(norm(h, store, f"encoder.{i}.ln2"), FeedForwardParams.from_store(store, f"encoder.{i}.mlp"))
    return norm(h, store, "encoder.ln")


def decoder_block_forward(y, h_audio, store, config, block):
    if y.shape[0] > config.max_target_len:
        raise DimensionError(f"decoder length {y.shape[0]} exceeds max_target_len={config.max_target_len}")
    if y.shape[1] != config.d or h_audio.shape[1] != config.d:
        raise DimensionError(f"decoder widths {y.shape[1]} / {h_audio.shape[1]} != d={config.d}")
    prefix = f"decoder.{block}"
    y = _residual_attention(y, store, f"{prefix}.ln1", f"{prefix}.self_attn", config, mask=causal_mask(y.shape[0]))
    y = _residual_attention(y, store, f"{prefix}.ln2", f"{prefix}.cross_attn", config, memory=h_audio)
    return y + feed_forward(norm(y, store, f"{prefix}.ln3"), FeedForwardParams.from_store(store, f"{prefix}.mlp"))


def aux_streams(u, config, embedder):
    """Embedded auxiliary streams in configured language order."""
    if embedder is None:
        raise ConfigError("a fusion model needs an auxiliary embedder")
    missing = [lang for lang in config.aux_languages if lang not in u.aux]
    if missing:
        raise CorpusError(f"utterance {u.id!r} is missing auxiliary streams {missing}")
    return [embedder.embed(u.aux[lang], lang).E for lang in config.aux_languages]


def decoder_inputs(teacher_tokens, config):
    tokens = np.asarray(teacher_tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.n_symbols):
        raise ValueError(f"teacher tokens outside the {config.n_symbols}-symbol vocabulary")
    return np.concatenate([[config.bos], tokens]).astype(np.int64)


def model_forward(u, ckpt, teacher_tokens, embedder=None, aux=None, audio_states=None, trace=None):
    """Logits (T_y x vocab_tgt) for BOS + teacher_tokens; row t predicts
    token t, the last row predicts EOS.

    ``aux`` / ``audio_states`` accept precomputed streams (frozen in stage 2);
    ``trace`` collects fusion attention weights keyed by (block, lang).
    """
    config, store = ckpt.config, ckpt.params
    ids = decoder_inputs(teacher_tokens, config)
    if ids.size > config.max_target_len:
        raise DimensionError(f"decoder length {ids.size} exceeds max_target_len={config.max_target_len}")

    if config.has_fusion and aux is None:
        aux = aux_streams(u, config, embedder)
    h = audio_states if audio_states is not None else encode_audio(u.audio, store, config)

    y = T.add_const(T.gather_rows(store["decoder.embed"], ids), sinusoidal_positions(ids.size, config.d))
    for block in range(config.n_dec):
        if config.has_fusion:
            block_trace = {} if trace is not None else None
            y = pgca_variant_forward(config.fusion_mode, y, aux, PgcaParams.from_store(store, config, block), block_trace)
            if trace is not None:
                trace.update({(block, lang): weights for lang, weights in block_trace.items()})
        y = decoder_block_forward(y, h, store, config, block)
    y = norm(y, store, "decoder.ln")
    return linear(y, store["decoder.out.w"], store["decoder.out.b"])


def greedy_decode(ckpt, u, embedder=None, max_symbols=None):
    """Free-running decode: feed back the argmax until EOS or the length cap."""
    config = ckpt.config
    limit = config.max_target_len - 1 if max_symbols is None else max_symbols
    with T.no_grad():
        h = encode_audio(u.audio, ckpt.params, config)
        aux = aux_streams(u, config, embedder) if config.has_fusion else None
        hypothesis = []
        while len(hypothesis) < limit:
            logits = model_forward(u, ckpt, hypothesis, aux=aux, audio_states=h)
            token = int(np.argmax(logits.data[-1]))
            if token == config.eos or token >= config.n_symbols:
                break
            hypothesis.append(token)
    return hypothesis
