import numpy as np
import pytest

from pgca.lab.evaluation import CerEntry, CerReport, cer, evaluate, evaluate_free_running, relative_reduction, teacher_forcing_decode
from pgca.model.network import init_checkpoint


def _levenshtein(a, b):
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (x != y)))
        previous = current
    return previous[-1]


class TestCer:
    def test_identical(self):
        entry = cer("abc", "abc")
        assert entry.cer == 0.0 and entry.edits == 0

    def test_one_substitution(self):
        entry = cer("abc", "abd")
        assert (entry.substitutions, entry.deletions, entry.insertions) == (1, 0, 0)
        assert entry.cer == pytest.approx(1 / 3)

    def test_one_deletion(self):
        entry = cer("abc", "ab")
        assert (entry.substitutions, entry.deletions, entry.insertions) == (0, 1, 0)

    def test_one_insertion(self):
        entry = cer("ab", "abc")
        assert (entry.substitutions, entry.deletions, entry.insertions) == (0, 0, 1)
        assert entry.cer == pytest.approx(0.5)

    def test_empty_hypothesis(self):
        entry = cer("abcd", "")
        assert entry.deletions == 4 and entry.cer == 1.0

    def test_can_exceed_one(self):
        assert cer("a", "xyz").cer == pytest.approx(3.0)

    def test_empty_reference(self):
        with pytest.raises(ValueError):
            cer("", "abc")

    def test_tie_prefers_substitution(self):
        entry = cer("ab", "ba")
        assert (entry.substitutions, entry.deletions, entry.insertions) == (2, 0, 0)

    def test_matches_an_independent_dp(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            ref = list(rng.integers(0, 4, int(rng.integers(1, 9))))
            hyp = list(rng.integers(0, 4, int(rng.integers(0, 9))))
            entry = cer(ref, hyp)
            assert entry.edits == _levenshtein(ref, hyp)
            assert len(ref) - entry.deletions + entry.insertions == len(hyp)

    def test_relabelling_does_not_change_the_score(self):
        rng = np.random.default_rng(5)
        perm = rng.permutation(6)
        for _ in range(50):
            ref, hyp = rng.integers(0, 6, 7), rng.integers(0, 6, 5)
            assert cer(ref, hyp) == cer(perm[ref], perm[hyp])


class TestPooling:
    def test_micro_average(self):
        entries = [("a", CerEntry(1, 0, 0, 2)), ("b", CerEntry(0, 0, 0, 8))]
        report = CerReport.pool(entries)
        assert report.cer == pytest.approx(0.1)
        assert report.ref_chars == 10 and report.substitutions == 1

    def test_relative_reduction(self):
        assert relative_reduction(13.40, 11.42) * 100 == pytest.approx(14.77, abs=0.01)
        report = CerReport.pool([("a", CerEntry(1, 0, 0, 4))], baseline_cer=0.5)
        assert report.rel_reduction == pytest.approx(0.5)

    def test_zero_baseline(self):
        with pytest.raises(ValueError):
            relative_reduction(0.0, 0.1)

    def test_empty(self):
        with pytest.raises(ValueError):
            CerReport.pool([])


class TestDecoding:
    @pytest.fixture
    def flat_ckpt(self, tiny_model):
        ckpt = init_checkpoint(tiny_model, 0)
        ckpt.params.assign("decoder.out.w", np.zeros(ckpt.params["decoder.out.w"].shape))
        ckpt.params.assign("decoder.out.b", np.zeros(ckpt.params["decoder.out.b"].shape))
        return ckpt

    def test_uniform_logits_pick_the_lowest_id(self, flat_ckpt, tiny_splits):
        u = tiny_splits.test[0]
        assert teacher_forcing_decode(flat_ckpt, u) == [0] * len(u.target)

    def test_one_hypothesis_symbol_per_reference_symbol(self, tiny_model, tiny_splits):
        ckpt = init_checkpoint(tiny_model, 0)
        report = evaluate(ckpt, tiny_splits.test)
        assert report.insertions == report.deletions
        assert report.ref_chars == sum(len(u.target) for u in tiny_splits.test)
        assert [uid for uid, _ in report.per_utterance] == tiny_splits.test.ids

    def test_parallel_scoring_matches_serial(self, tiny_model, tiny_splits):
        ckpt = init_checkpoint(tiny_model, 0)
        assert evaluate(ckpt, tiny_splits.test, workers=3).cer == evaluate(ckpt, tiny_splits.test).cer

    def test_limit(self, tiny_model, tiny_splits):
        report = evaluate(init_checkpoint(tiny_model, 0), tiny_splits.test, limit=2)
        assert len(report.per_utterance) == 2

    def test_free_running(self, flat_ckpt, tiny_splits):
        # Token 0 wins every step, so the hypothesis runs to the length cap.
        report = evaluate_free_running(flat_ckpt, tiny_splits.test)
        assert report.ref_chars == sum(len(u.target) for u in tiny_splits.test)
        assert report.cer > 0
