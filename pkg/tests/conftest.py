import numpy as np
import pytest

from pgca.corpus.synth import CorpusConfig, LanguageConfig, build_embedder, gen_corpus
from pgca.model.config import ModelConfig

TINY_LANGUAGES = (LanguageConfig("la", 0.0, 0.2), LanguageConfig("lb", 0.5, 1.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return ModelConfig(d=8, n_features=4, n_heads=2, d_ff=16, n_enc=1, n_dec=2, vocab_tgt=8, max_source_len=16, max_target_len=8)


@pytest.fixture
def tiny_corpus_cfg():
    return CorpusConfig(
        n_train=6,
        n_test=4,
        vocab_size=6,
        min_len=2,
        max_len=4,
        n_features=4,
        d_embed=8,
        positional_width=2,
        languages=TINY_LANGUAGES,
        seed=7,
    )


@pytest.fixture
def tiny_splits(tiny_corpus_cfg):
    return gen_corpus(tiny_corpus_cfg)


@pytest.fixture
def tiny_embedder(tiny_corpus_cfg):
    return build_embedder(tiny_corpus_cfg)
