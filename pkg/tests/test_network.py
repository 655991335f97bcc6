import numpy as np
import pytest

from pgca.core import tensor as T
from pgca.core.errors import ConfigError, CorpusError, DimensionError
from pgca.lab.training import cross_entropy_loss, target_ids
from pgca.model.network import (
    aux_streams,
    decoder_block_forward,
    encode_audio,
    extend_for_stage2,
    freeze_plan,
    greedy_decode,
    init_checkpoint,
    model_forward,
)
from pgca.model.params import ParameterStore, is_fusion_param, parameter_shapes

GATED = ("full_pgca", "no_tanh", "sequential", "shared")


def _randomise(store, rng, names, scale=0.3):
    for name in names:
        store.assign(name, rng.normal(scale=scale, size=store[name].shape))


class TestFreezePlan:
    def test_stage1_freezes_nothing(self, tiny_model):
        assert freeze_plan(1, tiny_model) == ()

    def test_stage2_trains_exactly_the_fusion_layers(self, tiny_model):
        config = tiny_model.with_fusion("full_pgca", ("la", "lb"))
        frozen = set(freeze_plan(2, config))
        names = set(parameter_shapes(config))
        assert names - frozen == {n for n in names if is_fusion_param(n)}
        assert "encoder.conv.w" in frozen and "decoder.out.w" in frozen and "decoder.embed" in frozen

    def test_unknown_stage(self, tiny_model):
        with pytest.raises(ValueError):
            freeze_plan(3, tiny_model)

    def test_stage2_checkpoint_trainable_set(self, tiny_model):
        stage2 = extend_for_stage2(init_checkpoint(tiny_model, 0), "shared", ("la", "lb"), 0)
        trainable = {name for name, _ in stage2.params.trainable()}
        assert trainable == {n for n in stage2.params.names() if ".pgca." in n}
        assert trainable == set(stage2.trainable_names())


class TestEncoder:
    def test_shape_and_determinism(self, tiny_model, rng):
        store = ParameterStore.initialise(tiny_model, 1)
        x = rng.normal(size=(6, tiny_model.n_features))
        h1, h2 = encode_audio(x, store, tiny_model), encode_audio(x, store, tiny_model)
        assert h1.shape == (6, tiny_model.d)
        assert h1.data.tobytes() == h2.data.tobytes()

    def test_zero_input_zero_conv_is_finite(self, tiny_model):
        store = ParameterStore.initialise(tiny_model, 1)
        store.assign("encoder.conv.w", np.zeros(store["encoder.conv.w"].shape))
        h = encode_audio(np.zeros((4, tiny_model.n_features)), store, tiny_model)
        assert h.shape == (4, tiny_model.d) and np.isfinite(h.data).all()

    def test_rejects_wrong_width_and_length(self, tiny_model):
        store = ParameterStore.initialise(tiny_model, 1)
        with pytest.raises(DimensionError):
            encode_audio(np.zeros((4, tiny_model.n_features + 1)), store, tiny_model)
        with pytest.raises(DimensionError):
            encode_audio(np.zeros((tiny_model.max_source_len + 1, tiny_model.n_features)), store, tiny_model)

    def test_gradients(self, tiny_model, rng):
        store = ParameterStore.initialise(tiny_model, 1)
        encoder = [n for n in store.names() if n.startswith("encoder.")]
        _randomise(store, rng, encoder)
        x = rng.normal(size=(4, tiny_model.n_features))
        w = T.Tensor(rng.normal(size=(4, tiny_model.d)))
        report = T.grad_check(lambda: T.sum_all(T.mul(encode_audio(x, store, tiny_model), w)), [store[n] for n in encoder])
        assert report.passed, report


class TestDecoderBlock:
    def test_single_position_and_shape(self, tiny_model, rng):
        store = ParameterStore.initialise(tiny_model, 1)
        h = T.Tensor(rng.normal(size=(5, tiny_model.d)))
        for t in (1, 3, tiny_model.max_target_len):
            y = T.Tensor(rng.normal(size=(t, tiny_model.d)))
            assert decoder_block_forward(y, h, store, tiny_model, 0).shape == (t, tiny_model.d)

    def test_length_cap(self, tiny_model, rng):
        store = ParameterStore.initialise(tiny_model, 1)
        y = T.Tensor(rng.normal(size=(tiny_model.max_target_len + 1, tiny_model.d)))
        with pytest.raises(DimensionError):
            decoder_block_forward(y, T.Tensor(rng.normal(size=(3, tiny_model.d))), store, tiny_model, 0)

    def test_gradients(self, tiny_model, rng):
        store = ParameterStore.initialise(tiny_model, 1)
        block = [n for n in store.names() if n.startswith("decoder.0.")]
        _randomise(store, rng, block)
        y = T.Tensor(rng.normal(size=(3, tiny_model.d)))
        h = T.Tensor(rng.normal(size=(4, tiny_model.d)))
        w = T.Tensor(rng.normal(size=(3, tiny_model.d)))

        def f():
            return T.sum_all(T.mul(decoder_block_forward(y, h, store, tiny_model, 0), w))

        assert T.grad_check(f, [store[n] for n in block]).passed


class TestModelForward:
    def test_logits_shape(self, tiny_model, tiny_splits):
        ckpt = init_checkpoint(tiny_model, 0)
        u = tiny_splits.train[0]
        assert model_forward(u, ckpt, u.target).shape == (len(u.target) + 1, tiny_model.vocab_tgt)

    @pytest.mark.parametrize("mode", GATED)
    def test_fresh_stage2_matches_stage1(self, mode, tiny_model, tiny_splits, tiny_embedder):
        stage1 = init_checkpoint(tiny_model, 0)
        _randomise(stage1.params, np.random.default_rng(5), stage1.params.names(), scale=0.2)
        stage2 = extend_for_stage2(stage1, mode, ("la", "lb"), 0)
        for u in list(tiny_splits.train) + list(tiny_splits.test):
            with T.no_grad():
                base = model_forward(u, stage1, u.target).data
                fused = model_forward(u, stage2, u.target, embedder=tiny_embedder).data
            assert np.max(np.abs(base - fused)) < 1e-9

    def test_stage2_needs_aux_streams(self, tiny_model, tiny_splits, tiny_embedder):
        stage2 = extend_for_stage2(init_checkpoint(tiny_model, 0), "full_pgca", ("la",), 0)
        u = tiny_splits.train[0]
        with pytest.raises(ConfigError):
            model_forward(u, stage2, u.target)
        stripped = type(u)(id=u.id, audio=u.audio, target=u.target, aux={})
        with pytest.raises(CorpusError):
            aux_streams(stripped, stage2.config, tiny_embedder)

    def test_vocab_overflow(self, tiny_model, tiny_splits):
        ckpt = init_checkpoint(tiny_model, 0)
        with pytest.raises(ValueError):
            model_forward(tiny_splits.train[0], ckpt, [tiny_model.n_symbols])

    def test_stage2_gradients_end_to_end(self, tiny_model, tiny_splits, tiny_embedder):
        rng = np.random.default_rng(11)
        stage1 = init_checkpoint(tiny_model, 0)
        _randomise(stage1.params, rng, stage1.params.names(), scale=0.2)
        stage2 = extend_for_stage2(stage1, "full_pgca", ("la", "lb"), 0)
        trainable = [t for _, t in stage2.params.trainable()]
        for t in trainable:
            t.data[...] = rng.normal(scale=0.3, size=t.shape)
        batch = list(tiny_splits.train)[:2]
        with T.no_grad():
            cached = [(encode_audio(u.audio, stage2.params, stage2.config), aux_streams(u, stage2.config, tiny_embedder)) for u in batch]

        def f():
            total = None
            for u, (h, aux) in zip(batch, cached):
                logits = model_forward(u, stage2, u.target, aux=aux, audio_states=h)
                loss = cross_entropy_loss(logits, target_ids(u.target, stage2.config))
                total = loss if total is None else total + loss
            return total

        report = T.grad_check(f, trainable, eps=1e-5, tol=1e-4)
        assert report.passed, report


class TestGreedyDecode:
    def test_hypothesis_is_bounded(self, tiny_model, tiny_splits):
        ckpt = init_checkpoint(tiny_model, 0)
        hypothesis = greedy_decode(ckpt, tiny_splits.test[0])
        assert len(hypothesis) <= tiny_model.max_target_len - 1
        assert all(0 <= t < tiny_model.n_symbols for t in hypothesis)

    def test_max_symbols(self, tiny_model, tiny_splits):
        ckpt = init_checkpoint(tiny_model, 0)
        assert len(greedy_decode(ckpt, tiny_splits.test[0], max_symbols=2)) <= 2
