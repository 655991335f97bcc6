import numpy as np
import pytest

from pgca.core.errors import CorpusError
from pgca.corpus.aux_embed import (
    TARGET_LANG,
    AuxEmbedder,
    AuxLanguageSpec,
    build_language_spec,
    cls_proximity,
    cosine,
    mean_cosine,
    rotation_transform,
)

VOCAB, D, POS = 6, 8, 2


def _embedder(offsets, seed=3):
    specs = {TARGET_LANG: build_language_spec(TARGET_LANG, VOCAB, 0.0, 0.0, D, POS, seed, identity=True)}
    for i, offset in enumerate(offsets):
        specs[f"l{i}"] = build_language_spec(f"l{i}", VOCAB, 0.0, offset, D, POS, seed)
    return AuxEmbedder(specs, D, POS, seed)


class TestLanguageSpec:
    def test_rejects_non_bijection(self):
        with pytest.raises(CorpusError, match="bijection"):
            AuxLanguageSpec("x", 3, np.array([0, 0, 1]), 0.0, np.eye(4), 0.0)

    def test_rejects_noise_rate_out_of_range(self):
        with pytest.raises(CorpusError):
            AuxLanguageSpec("x", 3, np.arange(3), 1.5, np.eye(4), 0.0)

    def test_rejects_offset_out_of_range(self):
        with pytest.raises(CorpusError):
            build_language_spec("x", VOCAB, 0.0, 4.0, D, POS, 0)

    def test_inverse_map_undoes_the_relabelling(self):
        spec = build_language_spec("x", VOCAB, 0.0, 0.5, D, POS, 9)
        np.testing.assert_array_equal(spec.inverse_map[spec.token_map], np.arange(VOCAB))

    def test_maps_are_read_only(self):
        spec = build_language_spec("x", VOCAB, 0.0, 0.5, D, POS, 9)
        with pytest.raises(ValueError):
            spec.token_map[0] = 1


class TestRotation:
    def test_orthogonal_and_positional_block_untouched(self):
        t = rotation_transform(0.7, 6, 2, np.random.default_rng(0))
        np.testing.assert_allclose(t @ t.T, np.eye(8), atol=1e-12)
        np.testing.assert_array_equal(t[6:, 6:], np.eye(2))
        np.testing.assert_array_equal(t[:6, 6:], 0.0)

    def test_every_vector_turns_by_the_angle(self, rng):
        t = rotation_transform(0.9, 6, 0, np.random.default_rng(1))
        v = rng.normal(size=6)
        assert cosine(v, t @ v) == pytest.approx(np.cos(0.9), abs=1e-12)

    def test_odd_lexical_width(self):
        with pytest.raises(CorpusError):
            rotation_transform(0.1, 5, 2, np.random.default_rng(0))


class TestEmbed:
    def test_deterministic(self):
        a = _embedder([0.3]).embed([1, 4, 2], "l0")
        b = _embedder([0.3]).embed([1, 4, 2], "l0")
        assert a.E.data.tobytes() == b.E.data.tobytes()
        assert a.E.shape == (3, D)

    def test_cls_is_mean_of_rows(self):
        out = _embedder([0.3]).embed([0, 5, 5, 2], "l0")
        np.testing.assert_allclose(out.cls, out.E.data.mean(axis=0), atol=1e-15)

    def test_identity_transform_is_table_lookup(self):
        embedder = _embedder([])
        tokens = [3, 0, 3]
        expected = embedder.base[tokens] + embedder.positions(3)
        np.testing.assert_allclose(embedder.embed(tokens, TARGET_LANG).E.data, expected, atol=1e-12)

    def test_empty_sequence(self):
        with pytest.raises(CorpusError, match="empty"):
            _embedder([0.3]).embed([], "l0")

    def test_out_of_vocabulary(self):
        with pytest.raises(CorpusError):
            _embedder([0.3]).embed([VOCAB], "l0")

    def test_unknown_language(self):
        with pytest.raises(CorpusError, match="Unknown auxiliary language"):
            _embedder([0.3]).embed([0], "zz")

    def test_translations_share_concepts(self):
        # With no rotation the relabelled sentence embeds like the target.
        embedder = _embedder([0.0])
        target = np.array([2, 1, 4])
        aux = embedder.spec("l0").token_map[target]
        np.testing.assert_allclose(embedder.embed(aux, "l0").E.data, embedder.embed(target, TARGET_LANG).E.data, atol=1e-12)


class TestProximity:
    def test_cosine_by_hand(self):
        assert cosine(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 / np.sqrt(2), abs=1e-15)

    def test_antipodal(self):
        assert cosine(np.array([1.0, 2.0]), np.array([-1.0, -2.0])) == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine(np.zeros(2), np.ones(2))

    def test_self_proximity_and_symmetry(self, rng):
        embedder = _embedder([0.4, 1.1])
        corpus = [tuple(rng.integers(0, VOCAB, 5)) for _ in range(10)]
        assert cls_proximity(corpus, "l0", corpus, "l0", embedder) == pytest.approx(1.0, abs=1e-12)
        assert cls_proximity(corpus, "l0", corpus, "l1", embedder) == pytest.approx(
            cls_proximity(corpus, "l1", corpus, "l0", embedder), abs=1e-12
        )

    def test_unpaired_and_empty(self):
        embedder = _embedder([0.4])
        with pytest.raises(ValueError):
            cls_proximity([(1,)], "l0", [(1,), (2,)], TARGET_LANG, embedder)
        with pytest.raises(ValueError):
            mean_cosine([], [])

    def test_proximity_falls_as_offset_grows(self, rng):
        offsets = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        embedder = _embedder(offsets)
        targets = [rng.integers(0, VOCAB, 6) for _ in range(20)]
        scores = []
        for i in range(len(offsets)):
            spec = embedder.spec(f"l{i}")
            aux = [spec.token_map[t] for t in targets]
            scores.append(cls_proximity(aux, f"l{i}", targets, TARGET_LANG, embedder))
        assert scores[0] == pytest.approx(1.0, abs=1e-12)
        assert all(a > b for a, b in zip(scores, scores[1:]))
