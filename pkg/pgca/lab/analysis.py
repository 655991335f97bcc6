"""Read-only analyses over trained checkpoints: gates, attention heatmaps,
language selection and the incremental / noise curves built on stage-2 runs."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from pgca.core.errors import ConfigError, CorpusError
from pgca.core.tensor import no_grad
from pgca.corpus.aux_embed import TARGET_LANG, cls_proximity
from pgca.corpus.synth import LanguageConfig, gen_corpus
from pgca.lab.evaluation import evaluate
from pgca.lab.training import train_stage2
from pgca.model.fusion import gate_table
from pgca.model.network import model_forward

logger = logging.getLogger(__name__)

SELECTION_METRICS = ("cer", "proximity", "gating")


@dataclass(frozen=True)
class GateReport:
    """tanh of every stored gate, keyed by decoder layer."""

    languages: tuple
    attn: dict
    fnn: dict
    default_layer: int

    @property
    def layers(self):
        return sorted(self.attn)

    def layer(self, index=None):
        index = self.default_layer if index is None else index
        if index not in self.attn:
            raise IndexError(f"decoder layer {index} outside 0..{len(self.attn) - 1}")
        return dict(self.attn[index])

    def mean_by_language(self):
        return {lang: float(np.mean([self.attn[i][lang] for i in self.layers])) for lang in self.languages}

    def rows(self):
        out = []
        for i in self.layers:
            out.extend((i, lang, self.attn[i][lang]) for lang in self.languages)
            out.append((i, "fnn", self.fnn[i]))
        return out


def extract_gates(ckpt):
    config = ckpt.config
    if not config.is_gated:
        raise ConfigError(f"fusion mode {config.fusion_mode!r} has no gates")
    table = gate_table(ckpt.params, config)
    attn = {i: {lang: table[(i, lang)] for lang in config.aux_languages} for i in range(config.n_dec)}
    fnn = {i: table[(i, "fnn")] for i in range(config.n_dec)}
    return GateReport(tuple(config.aux_languages), attn, fnn, default_layer=config.n_dec - 1)


@dataclass(frozen=True)
class Heatmap:
    matrix: np.ndarray
    row_labels: tuple
    col_labels: tuple

    def header(self):
        return ("query_token",) + tuple(self.col_labels)

    def rows(self):
        return [(label,) + tuple(float(v) for v in row) for label, row in zip(self.row_labels, self.matrix)]


def _token_label(token, config):
    if token == config.bos:
        return "<bos>"
    return f"t{token}"


def attention_heatmap(ckpt, u, layer, lang, embedder):
    """Head-averaged fusion attention of decoder layer ``layer`` over the
    ``lang`` stream, under teacher forcing on ``u``."""
    config = ckpt.config
    if not config.is_gated:
        raise ConfigError(f"fusion mode {config.fusion_mode!r} has no attention branches")
    if not 0 <= layer < config.n_dec:
        raise IndexError(f"decoder layer {layer} outside 0..{config.n_dec - 1}")
    if lang not in config.aux_languages:
        raise CorpusError(f"language {lang!r} is not fused by this checkpoint {list(config.aux_languages)}")
    trace = {}
    with no_grad():
        model_forward(u, ckpt, u.target, embedder=embedder, trace=trace)
    matrix = np.asarray(trace[(layer, lang)]).mean(axis=0)
    rows = (_token_label(config.bos, config),) + tuple(_token_label(t, config) for t in u.target)
    cols = tuple(f"{lang}:{t}" for t in u.aux[lang])
    return Heatmap(matrix, rows, cols)


def diagonal_fraction(heatmap):
    """Share of rows whose argmax is their own position (rows past the
    stream end are skipped)."""
    n_cols = heatmap.matrix.shape[1]
    rows = [i for i in range(heatmap.matrix.shape[0]) if i < n_cols]
    if not rows:
        return 0.0
    return sum(int(np.argmax(heatmap.matrix[i])) == i for i in rows) / len(rows)


def select_topk(scores, metric, k):
    """cer ranks ascending, proximity and gating descending; ties by lang id."""
    if metric not in SELECTION_METRICS:
        raise ValueError(f"Unknown selection metric: {metric!r}")
    if not 1 <= k <= len(scores):
        raise ValueError(f"k={k} outside 1..{len(scores)}")
    if metric == "cer":
        ranked = sorted(scores, key=lambda lang: (scores[lang], lang))
    else:
        ranked = sorted(scores, key=lambda lang: (-scores[lang], lang))
    return ranked[:k]


@dataclass
class RunResult:
    fusion_mode: str
    languages: tuple
    checkpoint: object
    cer: float
    gates: GateReport = None
    extra: dict = field(default_factory=dict)


def stage2_runner(stage1, splits, budget, embedder, workers=1):
    """(fusion_mode, languages) -> RunResult, training from ``stage1``."""

    def run(fusion_mode, languages):
        cfg = stage1.config.with_fusion(fusion_mode, languages)
        best = train_stage2(stage1, splits, cfg, budget, embedder, workers=workers)
        report = evaluate(best, splits.test, embedder, workers=workers)
        gates = extract_gates(best) if best.config.is_gated else None
        return RunResult(fusion_mode, tuple(languages), best, report.cer, gates)

    return run


@dataclass(frozen=True)
class CurvePoint:
    k: int
    languages: tuple
    cer: float
    gates: GateReport = None


def incremental_experiment(stage1, splits, order, budget, embedder, fusion_mode="full_pgca", run=None, workers=1):
    """One stage-2 run per prefix of ``order``, same budget and seed."""
    if not order:
        raise ValueError("incremental experiment needs at least one language")
    if len(splits.train):
        missing = [lang for lang in order if lang not in splits.train[0].aux]
        if missing:
            raise CorpusError(f"dataset has no auxiliary streams for {missing}")
    run = run or stage2_runner(stage1, splits, budget, embedder, workers)
    curve = []
    for k in range(1, len(order) + 1):
        result = run(fusion_mode, tuple(order[:k]))
        curve.append(CurvePoint(k, result.languages, result.cer, result.gates))
        logger.info("incremental k=%d %s: CER %.4f", k, list(result.languages), result.cer)
    return curve


def _clean_translation(tokens, spec):
    return tuple(int(t) for t in spec.token_map[np.asarray(tokens, dtype=np.int64)])


def proximity_table(dataset, embedder, languages, pivot=None):
    """Rows (lang, proximity to the target corpus, proximity to ``pivot``).

    Measured on uncorrupted translations, so a language's noise rate never
    moves its proximity; only its embedding offset does."""
    if len(dataset) == 0:
        raise CorpusError("proximity needs a non-empty dataset")
    if pivot is not None and pivot not in languages:
        raise CorpusError(f"pivot {pivot!r} is not among {list(languages)}")
    target = [u.target for u in dataset]
    streams = {lang: [_clean_translation(u.target, embedder.spec(lang)) for u in dataset] for lang in languages}
    rows = []
    for lang in languages:
        to_target = cls_proximity(streams[lang], lang, target, TARGET_LANG, embedder)
        to_pivot = None
        if pivot is not None and lang != pivot:
            to_pivot = cls_proximity(streams[lang], lang, streams[pivot], pivot, embedder)
        rows.append((lang, to_target, to_pivot))
    return rows


def noise_sweep(stage1, corpus_cfg, lang, rates, budget, embedder, fusion_mode="full_pgca", workers=1):
    """Retrain the single-language fusion layer while ``lang``'s noise rate
    varies. Targets and audio do not depend on the noise rates, so the
    stage-1 model stays valid for every regenerated corpus."""
    base = corpus_cfg.language(lang)
    rows = []
    for rate in rates:
        languages = tuple(LanguageConfig(l.lang_id, rate, l.offset_scale) if l.lang_id == lang else l for l in corpus_cfg.languages)
        splits = gen_corpus(replace(corpus_cfg, languages=languages))
        result = stage2_runner(stage1, splits, budget, embedder, workers)(fusion_mode, (lang,))
        rows.append((float(rate), result.cer))
        logger.info("noise sweep %s p=%.2f (configured %.2f): CER %.4f", lang, rate, base.noise_rate, result.cer)
    return rows


def selection_experiment(scores_by_metric, run, fusion_mode="full_pgca"):
    """Rows (metric, k, languages, cer) for every metric and k; ``run`` is
    expected to cache repeated language subsets."""
    rows = []
    for metric in SELECTION_METRICS:
        scores = scores_by_metric[metric]
        for k in range(1, len(scores) + 1):
            chosen = tuple(select_topk(scores, metric, k))
            rows.append((metric, k, chosen, run(fusion_mode, chosen).cer))
    return rows
