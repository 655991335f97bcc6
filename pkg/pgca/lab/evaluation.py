import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pgca.core.tensor import no_grad
from pgca.model.network import greedy_decode, model_forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CerEntry:
    substitutions: int
    deletions: int
    insertions: int
    ref_chars: int

    @property
    def edits(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self):
        return self.edits / self.ref_chars


def cer(reference, hypothesis):
    """Unit-cost edit distance split into S/D/I. On equal cost the backtrace
    prefers substitution, then deletion, then insertion."""
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise ValueError("CER needs a non-empty reference")
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i, j] = min(
                dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                dist[i - 1, j] + 1,
                dist[i, j - 1] + 1,
            )

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return CerEntry(int(subs), dels, ins, n)


def relative_reduction(baseline_cer, system_cer):
    if baseline_cer == 0:
        raise ValueError("relative reduction against a zero baseline CER is undefined")
    return (baseline_cer - system_cer) / baseline_cer


@dataclass
class CerReport:
    cer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_chars: int
    per_utterance: list = field(default_factory=list)
    baseline_cer: float = None
    rel_reduction: float = None

    @classmethod
    def pool(cls, entries, baseline_cer=None):
        """Micro-average: total edits over total reference symbols."""
        if not entries:
            raise ValueError("cannot score an empty dataset")
        subs = sum(e.substitutions for _, e in entries)
        dels = sum(e.deletions for _, e in entries)
        ins = sum(e.insertions for _, e in entries)
        ref = sum(e.ref_chars for _, e in entries)
        value = (subs + dels + ins) / ref
        rel = None if baseline_cer is None else relative_reduction(baseline_cer, value)
        return cls(value, subs, dels, ins, ref, list(entries), baseline_cer, rel)


def teacher_forcing_decode(ckpt, u, embedder=None):
    """Argmax of every logits row under the ground-truth prefix; ties go to
    the lowest token id."""
    with no_grad():
        logits = model_forward(u, ckpt, u.target, embedder=embedder)
    return [int(t) for t in np.argmax(logits.data[: len(u.target)], axis=-1)]


def _subset(dataset, limit):
    utterances = list(dataset)
    return utterances[:limit] if limit else utterances


def _score(decode, ckpt, utterances, embedder, workers):
    def one(u):
        return u.id, cer(u.target, decode(ckpt, u, embedder))

    if workers <= 1:
        return [one(u) for u in utterances]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, utterances))


def evaluate(ckpt, dataset, embedder=None, baseline_cer=None, workers=1, limit=0):
    utterances = _subset(dataset, limit)
    if not utterances:
        raise ValueError("cannot evaluate on an empty dataset")
    report = CerReport.pool(_score(teacher_forcing_decode, ckpt, utterances, embedder, workers), baseline_cer)
    logger.debug("teacher-forcing CER %.4f over %d utterances", report.cer, len(utterances))
    return report


def evaluate_free_running(ckpt, dataset, embedder=None, workers=1, limit=0):
    utterances = _subset(dataset, limit)
    if not utterances:
        raise ValueError("cannot evaluate on an empty dataset")

    def decode(ckpt, u, embedder):
        return greedy_decode(ckpt, u, embedder)

    return CerReport.pool(_score(decode, ckpt, utterances, embedder, workers))
