"""Frozen auxiliary-text embedder and the sentence-proximity metric.

Each auxiliary language is a relabelling of the target symbols (``token_map``)
plus a fixed linear map of a shared concept table. Embedding columns split in
two: a lexical block, where the language's transform rotates every concept by
``offset_scale`` radians, and a positional block the transform leaves alone.
The rotation keeps norms, so sentence cosine to the target language falls
monotonically as ``offset_scale`` grows from 0 to pi.
"""

from dataclasses import dataclass

import numpy as np

from pgca.core.errors import CorpusError
from pgca.core.rng import make_rng
from pgca.core.tensor import Tensor
from pgca.model.layers import sinusoidal_positions

TARGET_LANG = "target"
POSITION_SCALE = 0.5


@dataclass(frozen=True, eq=False)
class AuxLanguageSpec:
    lang_id: str
    vocab_size: int
    token_map: np.ndarray
    noise_rate: float
    embed_transform: np.ndarray
    offset_scale: float

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise CorpusError(f"noise rate {self.noise_rate} for {self.lang_id!r} is outside [0, 1]")
        token_map = np.array(self.token_map, dtype=np.int64)
        if token_map.shape != (self.vocab_size,) or not np.array_equal(np.sort(token_map), np.arange(self.vocab_size)):
            raise CorpusError(f"token map for {self.lang_id!r} is not a bijection on {self.vocab_size} symbols")
        transform = np.array(self.embed_transform, dtype=np.float64)
        token_map.setflags(write=False)
        transform.setflags(write=False)
        object.__setattr__(self, "token_map", token_map)
        object.__setattr__(self, "embed_transform", transform)

    @property
    def inverse_map(self):
        inverse = np.empty_like(self.token_map)
        inverse[self.token_map] = np.arange(self.vocab_size)
        return inverse


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def rotation_transform(angle, lexical_width, positional_width, rng):
    """block_diag(U R(angle) U^T, I): every 2-plane of the lexical block turns
    by the same angle, the positional block is untouched."""
    if lexical_width % 2:
        raise CorpusError(f"lexical width {lexical_width} must be even")
    planes = np.zeros((lexical_width, lexical_width))
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, lexical_width, 2):
        planes[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    u = _random_orthogonal(rng, lexical_width)
    transform = np.eye(lexical_width + positional_width)
    transform[:lexical_width, :lexical_width] = u @ planes @ u.T
    return transform


def build_language_spec(lang_id, vocab_size, noise_rate, offset_scale, d, positional_width, seed, identity=False):
    if not 0.0 <= offset_scale <= np.pi:
        raise CorpusError(f"offset scale {offset_scale} for {lang_id!r} is outside [0, pi]")
    rng = make_rng(seed, "language", lang_id)
    token_map = np.arange(vocab_size) if identity else rng.permutation(vocab_size)
    transform = rotation_transform(offset_scale, d - positional_width, positional_width, rng)
    return AuxLanguageSpec(lang_id, vocab_size, token_map, float(noise_rate), transform, float(offset_scale))


@dataclass(frozen=True, eq=False)
class AuxEmbedding:
    E: Tensor
    cls: np.ndarray


class AuxEmbedder:
    """Deterministic and parameter-free at use time: nothing here ever
    receives a gradient."""

    def __init__(self, specs, d, positional_width, seed):
        self.specs = dict(specs)
        self.d = d
        self.positional_width = positional_width
        vocab_sizes = {spec.vocab_size for spec in self.specs.values()}
        if len(vocab_sizes) > 1:
            raise CorpusError(f"languages disagree on vocabulary size: {sorted(vocab_sizes)}")
        vocab = vocab_sizes.pop() if vocab_sizes else 0
        lexical = d - positional_width
        self.base = np.zeros((vocab, d))
        self.base[:, :lexical] = make_rng(seed, "concepts").normal(0.0, 1.0 / np.sqrt(max(lexical, 1)), (vocab, lexical))
        self.base.setflags(write=False)

    def spec(self, lang):
        try:
            return self.specs[lang]
        except KeyError:
            raise CorpusError(f"Unknown auxiliary language: {lang!r}") from None

    def positions(self, length):
        table = np.zeros((length, self.d))
        table[:, self.d - self.positional_width :] = POSITION_SCALE * sinusoidal_positions(length, self.positional_width)
        return table

    def base_embed(self, tokens, lang):
        return self.base[self.spec(lang).inverse_map[np.asarray(tokens)]]

    def embed(self, tokens, lang):
        spec = self.spec(lang)
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise CorpusError(f"cannot embed an empty {lang!r} sequence")
        if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
            raise CorpusError(f"token outside the {spec.vocab_size}-symbol {lang!r} vocabulary")
        rows = self.base_embed(tokens, lang) @ spec.embed_transform.T + self.positions(tokens.size)
        return AuxEmbedding(E=Tensor(rows), cls=rows.mean(axis=0))


def cosine(a, b):
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise ValueError("cosine of a zero-norm sentence vector is undefined")
    return float(np.clip(np.dot(a, b) / np.sqrt(aa * bb), -1.0, 1.0))


def mean_cosine(vectors_a, vectors_b):
    if len(vectors_a) != len(vectors_b):
        raise ValueError(f"unpaired corpora: {len(vectors_a)} vs {len(vectors_b)} sentences")
    if not vectors_a:
        raise ValueError("proximity of empty corpora is undefined")
    return float(np.mean([cosine(a, b) for a, b in zip(vectors_a, vectors_b)]))


def cls_proximity(corpus_a, lang_a, corpus_b, lang_b, embedder):
    """Mean cosine between sentence vectors of two sentence-aligned corpora."""
    if len(corpus_a) != len(corpus_b):
        raise ValueError(f"unpaired corpora: {len(corpus_a)} vs {len(corpus_b)} sentences")
    return mean_cosine(
        [embedder.embed(tokens, lang_a).cls for tokens in corpus_a],
        [embedder.embed(tokens, lang_b).cls for tokens in corpus_b],
    )
