"""Synthetic corpus: audio-like features, target symbols, noisy translations.

Each target symbol emits ``frames_per_token`` frames of its prototype vector
plus Gaussian noise. Prototypes come in clusters of ``cluster_size`` that sit
close together, so the audio alone leaves near-homophones ambiguous and an
auxiliary translation can resolve them. A translation applies the language's
bijection and then substitutes each position with probability ``noise_rate``.
"""

import hashlib
import json
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from pgca.core.errors import CorpusError
from pgca.core.rng import make_rng
from pgca.corpus.aux_embed import TARGET_LANG, AuxEmbedder, build_language_spec

logger = logging.getLogger(__name__)

FRAME_SECONDS = 0.01


@dataclass(frozen=True)
class LanguageConfig:
    lang_id: str
    noise_rate: float
    offset_scale: float


DEFAULT_LANGUAGES = (
    LanguageConfig("l0", 0.0, 0.2),
    LanguageConfig("l1", 0.1, 0.6),
    LanguageConfig("l2", 0.3, 1.0),
    LanguageConfig("l3", 0.6, 1.6),
    LanguageConfig("l4", 0.9, 2.4),
)


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 2000
    n_test: int = 400
    vocab_size: int = 32
    min_len: int = 4
    max_len: int = 12
    n_features: int = 16
    frames_per_token: int = 2
    audio_noise: float = 0.5
    cluster_size: int = 2
    prototype_spread: float = 0.5
    swap_rate: float = 0.0
    d_embed: int = 32
    positional_width: int = 8
    languages: tuple = field(default_factory=lambda: DEFAULT_LANGUAGES)
    seed: int = 0
    workers: int = 1

    @property
    def lang_ids(self):
        return tuple(lang.lang_id for lang in self.languages)

    def language(self, lang_id):
        for lang in self.languages:
            if lang.lang_id == lang_id:
                return lang
        raise CorpusError(f"Unknown auxiliary language: {lang_id!r}")

    def validate(self, strict=True):
        problems = []
        for name in ("vocab_size", "min_len", "n_features", "frames_per_token", "cluster_size", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.vocab_size == 1:
            problems.append("vocab_size must be at least 2 so a corrupted symbol has somewhere to go")
        if self.n_train < 0 or self.n_test < 0:
            problems.append("utterance counts must be non-negative")
        if self.max_len < self.min_len:
            problems.append(f"max_len={self.max_len} < min_len={self.min_len}")
        if self.audio_noise < 0 or self.prototype_spread < 0:
            problems.append("noise scales must be non-negative")
        if not 0.0 <= self.swap_rate <= 1.0:
            problems.append(f"swap_rate={self.swap_rate} outside [0, 1]")
        if (self.d_embed - self.positional_width) % 2 or self.positional_width < 0 or self.d_embed <= self.positional_width:
            problems.append(f"d_embed={self.d_embed} minus positional_width={self.positional_width} must be positive and even")
        seen = set()
        for lang in self.languages:
            if not lang.lang_id or "." in lang.lang_id or lang.lang_id in seen or lang.lang_id == TARGET_LANG:
                problems.append(f"bad or duplicate language id {lang.lang_id!r}")
            seen.add(lang.lang_id)
            if not 0.0 <= lang.noise_rate <= 1.0:
                problems.append(f"noise_rate={lang.noise_rate} for {lang.lang_id!r} outside [0, 1]")
            if not 0.0 <= lang.offset_scale <= np.pi:
                problems.append(f"offset_scale={lang.offset_scale} for {lang.lang_id!r} outside [0, pi]")
        if problems and strict:
            raise CorpusError("Invalid corpus configuration: " + "; ".join(problems))
        return problems

    def as_dict(self):
        data = asdict(self)
        data["languages"] = [asdict(lang) for lang in self.languages]
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["languages"] = tuple(LanguageConfig(**lang) for lang in data.get("languages", ()))
        return cls(**data)

    def digest(self):
        """sha256 over everything that shapes the generated data."""
        content = self.as_dict()
        content.pop("workers")
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(eq=False)
class Utterance:
    id: str
    audio: np.ndarray
    target: tuple
    aux: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.target == other.target
            and self.aux == other.aux
            and self.audio.shape == other.audio.shape
            and self.audio.tobytes() == other.audio.tobytes()
        )


@dataclass(eq=False)
class Dataset:
    split: str
    config_digest: str
    utterances: list = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, index):
        return self.utterances[index]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.split, self.config_digest, self.utterances) == (other.split, other.config_digest, other.utterances)

    @property
    def ids(self):
        return [u.id for u in self.utterances]


@dataclass(eq=False)
class CorpusSplits:
    train: Dataset
    test: Dataset


def prototypes(cfg):
    rng = make_rng(cfg.seed, "prototypes")
    n_clusters = -(-cfg.vocab_size // cfg.cluster_size)
    centres = rng.normal(0.0, 1.0, (n_clusters, cfg.n_features))
    offsets = rng.normal(0.0, cfg.prototype_spread, (cfg.vocab_size, cfg.n_features))
    return centres[np.arange(cfg.vocab_size) // cfg.cluster_size] + offsets


def synth_audio(target, cfg, seed, table=None):
    """(frames_per_token * len(target)) x n_features feature matrix."""
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= cfg.vocab_size):
        raise CorpusError(f"target symbol outside the {cfg.vocab_size}-symbol vocabulary")
    table = prototypes(cfg) if table is None else table
    clean = np.repeat(table[target], cfg.frames_per_token, axis=0)
    return clean + make_rng(seed, "audio").normal(0.0, cfg.audio_noise, clean.shape)


def translate_aux(target, spec, seed, swap_rate=0.0):
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= spec.vocab_size):
        raise CorpusError(f"target symbol outside the {spec.vocab_size}-symbol vocabulary")
    if spec.vocab_size < 2 and spec.noise_rate > 0:
        raise CorpusError("corrupting translations needs at least two symbols")
    rng = make_rng(seed, "translate", spec.lang_id)
    out = spec.token_map[target].copy()
    corrupt = rng.random(out.size) < spec.noise_rate
    # Uniform over the other V-1 symbols: draw from V-1 and skip the clean one.
    draws = rng.integers(0, spec.vocab_size - 1, out.size)
    replacement = draws + (draws >= out)
    out[corrupt] = replacement[corrupt]
    if swap_rate > 0.0:
        for i in np.flatnonzero(rng.random(max(out.size - 1, 0)) < swap_rate):
            out[i], out[i + 1] = out[i + 1], out[i]
    return tuple(int(t) for t in out)


def build_language_specs(cfg):
    specs = OrderedDict()
    for lang in cfg.languages:
        specs[lang.lang_id] = build_language_spec(
            lang.lang_id, cfg.vocab_size, lang.noise_rate, lang.offset_scale, cfg.d_embed, cfg.positional_width, cfg.seed
        )
    return specs


def target_spec(cfg):
    return build_language_spec(TARGET_LANG, cfg.vocab_size, 0.0, 0.0, cfg.d_embed, cfg.positional_width, cfg.seed, identity=True)


def build_embedder(cfg):
    specs = build_language_specs(cfg)
    specs[TARGET_LANG] = target_spec(cfg)
    return AuxEmbedder(specs, cfg.d_embed, cfg.positional_width, cfg.seed)


def _make_utterance(cfg, split, index, specs, table):
    seed = int(make_rng(cfg.seed, split, index).integers(0, 2**31 - 1))
    rng = make_rng(seed, "target")
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    target = tuple(int(t) for t in rng.integers(0, cfg.vocab_size, length))
    aux = {lang: translate_aux(target, spec, seed, cfg.swap_rate) for lang, spec in specs.items()}
    return Utterance(id=f"{split}-{index:06d}", audio=synth_audio(target, cfg, seed, table), target=target, aux=aux)


def _generate_split(cfg, split, count, specs, table):
    if cfg.workers <= 1:
        return [_make_utterance(cfg, split, i, specs, table) for i in range(count)]
    # Per-utterance seeds make the result independent of scheduling.
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda i: _make_utterance(cfg, split, i, specs, table), range(count)))


def gen_corpus(cfg):
    cfg.validate(strict=True)
    specs = build_language_specs(cfg)
    table = prototypes(cfg)
    digest = cfg.digest()
    splits = CorpusSplits(
        train=Dataset("train", digest, _generate_split(cfg, "train", cfg.n_train, specs, table)),
        test=Dataset("test", digest, _generate_split(cfg, "test", cfg.n_test, specs, table)),
    )
    logger.info("generated corpus: %d train / %d test utterances, languages %s", cfg.n_train, cfg.n_test, list(specs))
    return splits


def corpus_summary(splits, cfg):
    """Plain-text table: split, frames, frame-hours equivalent, utterances."""
    lines = [f"{'split':<8}{'frames':>10}{'hours':>10}{'utterances':>12}"]
    for dataset in (splits.train, splits.test):
        frames = sum(u.audio.shape[0] for u in dataset)
        hours = frames * FRAME_SECONDS / 3600.0
        lines.append(f"{dataset.split:<8}{frames:>10d}{hours:>10.4f}{len(dataset):>12d}")
    lines.append(f"languages: {', '.join(f'{l.lang_id}(p={l.noise_rate}, offset={l.offset_scale})' for l in cfg.languages)}")
    return "\n".join(lines) + "\n"
