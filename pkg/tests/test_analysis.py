from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from pgca.core.errors import ConfigError, CorpusError
from pgca.corpus.synth import CorpusConfig, LanguageConfig, Utterance, build_embedder, gen_corpus, synth_audio
from pgca.lab.analysis import (
    Heatmap,
    attention_heatmap,
    diagonal_fraction,
    extract_gates,
    incremental_experiment,
    proximity_table,
    select_topk,
    selection_experiment,
)
from pgca.model.network import extend_for_stage2, init_checkpoint

# Single-language CERs and proximities from a published five-language study.
CER_SCORES = {"Mandarin": 11.87, "Hindi": 13.17, "English": 13.10, "French": 12.98, "Spanish": 12.84}
PROXIMITY_SCORES = {"Mandarin": 0.905, "Hindi": 0.854, "English": 0.552, "French": 0.821, "Spanish": 0.843}


@pytest.fixture
def stage2(tiny_model):
    return extend_for_stage2(init_checkpoint(tiny_model, 0), "full_pgca", ("la", "lb"), 0)


class TestSelectTopK:
    def test_by_cer(self):
        assert select_topk(CER_SCORES, "cer", 2) == ["Mandarin", "Spanish"]

    def test_by_proximity(self):
        assert select_topk(PROXIMITY_SCORES, "proximity", 2) == ["Mandarin", "Hindi"]

    def test_all_languages(self):
        assert sorted(select_topk(CER_SCORES, "cer", 5)) == sorted(CER_SCORES)

    def test_ties_break_by_language_id(self):
        assert select_topk({"b": 0.5, "a": 0.5, "c": 0.9}, "gating", 2) == ["c", "a"]

    def test_affine_rescaling_keeps_the_order(self):
        scaled = {lang: 3.0 * v + 7.0 for lang, v in PROXIMITY_SCORES.items()}
        for k in range(1, 6):
            assert select_topk(scaled, "proximity", k) == select_topk(PROXIMITY_SCORES, "proximity", k)

    def test_bad_arguments(self):
        with pytest.raises(ValueError, match="Unknown selection metric"):
            select_topk(CER_SCORES, "wer", 1)
        with pytest.raises(ValueError):
            select_topk(CER_SCORES, "cer", 0)
        with pytest.raises(ValueError):
            select_topk(CER_SCORES, "cer", 6)


class TestGates:
    def test_fresh_gates(self, stage2):
        report = extract_gates(stage2)
        assert report.layers == [0, 1] and report.default_layer == 1
        assert report.layer() == {"la": 0.0, "lb": 0.0}
        assert report.mean_by_language() == {"la": 0.0, "lb": 0.0}
        assert report.rows()[:3] == [(0, "la", 0.0), (0, "lb", 0.0), (0, "fnn", 0.0)]

    def test_reads_tanh_of_the_coefficient(self, stage2):
        stage2.params.assign("decoder.1.pgca.alpha_attn.lb", 0.5)
        assert extract_gates(stage2).layer(1)["lb"] == pytest.approx(np.tanh(0.5))

    def test_bad_layer(self, stage2):
        with pytest.raises(IndexError):
            extract_gates(stage2).layer(5)

    def test_pooled_mode_has_no_gates(self, tiny_model):
        ckpt = extend_for_stage2(init_checkpoint(tiny_model, 0), "addition", ("la",), 0)
        with pytest.raises(ConfigError):
            extract_gates(ckpt)


class TestHeatmap:
    def test_rows_are_distributions(self, stage2, tiny_splits, tiny_embedder):
        u = tiny_splits.test[0]
        heatmap = attention_heatmap(stage2, u, 1, "lb", tiny_embedder)
        assert heatmap.matrix.shape == (len(u.target) + 1, len(u.aux["lb"]))
        np.testing.assert_allclose(heatmap.matrix.sum(axis=1), 1.0, atol=1e-9)
        assert heatmap.row_labels[0] == "<bos>"
        assert heatmap.header()[1] == f"lb:{u.aux['lb'][0]}"
        assert len(heatmap.rows()) == len(u.target) + 1

    def test_single_token_stream(self, stage2, tiny_corpus_cfg, tiny_embedder):
        u = Utterance(id="one", audio=synth_audio([2], tiny_corpus_cfg, 0), target=(2,), aux={"la": (3,), "lb": (1,)})
        heatmap = attention_heatmap(stage2, u, 0, "la", tiny_embedder)
        np.testing.assert_allclose(heatmap.matrix, np.ones((2, 1)), atol=1e-12)

    def test_checkpoint_is_read_only(self, stage2, tiny_splits, tiny_embedder):
        before = {name: a.tobytes() for name, a in stage2.params.arrays().items()}
        attention_heatmap(stage2, tiny_splits.test[1], 0, "la", tiny_embedder)
        assert {name: a.tobytes() for name, a in stage2.params.arrays().items()} == before

    def test_errors(self, stage2, tiny_splits, tiny_embedder):
        u = tiny_splits.test[0]
        with pytest.raises(IndexError):
            attention_heatmap(stage2, u, 2, "la", tiny_embedder)
        with pytest.raises(CorpusError):
            attention_heatmap(stage2, u, 0, "zz", tiny_embedder)

    def test_diagonal_fraction(self):
        matrix = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert diagonal_fraction(Heatmap(matrix, ("a", "b", "c"), ("x", "y"))) == 1.0
        assert diagonal_fraction(Heatmap(matrix[:, ::-1], ("a", "b", "c"), ("x", "y"))) == 0.0


class TestProximityTable:
    def test_rows(self, tiny_splits, tiny_embedder):
        rows = proximity_table(tiny_splits.test, tiny_embedder, ("la", "lb"), pivot="la")
        assert [r[0] for r in rows] == ["la", "lb"]
        assert rows[0][2] is None and rows[1][2] is not None
        assert rows[0][1] > rows[1][1]
        assert all(-1.0 <= r[1] <= 1.0 for r in rows)

    def test_near_noisy_language_outranks_far_clean_one(self):
        languages = (LanguageConfig("near_noisy", 0.9, 0.2), LanguageConfig("far_clean", 0.0, 1.0))
        cfg = CorpusConfig(n_train=0, n_test=40, languages=languages, seed=3)
        rows = proximity_table(gen_corpus(cfg).test, build_embedder(cfg), ("near_noisy", "far_clean"), pivot="far_clean")
        proximity = {lang: to_target for lang, to_target, _ in rows}
        assert proximity["near_noisy"] > proximity["far_clean"]

    def test_noise_rate_does_not_move_proximity(self, tiny_corpus_cfg, tiny_splits, tiny_embedder):
        noisy_cfg = replace(tiny_corpus_cfg, languages=(LanguageConfig("la", 0.9, 0.2), LanguageConfig("lb", 1.0, 1.2)))
        clean = proximity_table(tiny_splits.test, tiny_embedder, ("la", "lb"), pivot="la")
        noisy = proximity_table(gen_corpus(noisy_cfg).test, build_embedder(noisy_cfg), ("la", "lb"), pivot="la")
        assert noisy == clean

    def test_unknown_pivot(self, tiny_splits, tiny_embedder):
        with pytest.raises(CorpusError):
            proximity_table(tiny_splits.test, tiny_embedder, ("la",), pivot="lb")


class TestExperiments:
    @staticmethod
    def _fake_run(calls):
        def run(mode, languages):
            calls.append((mode, tuple(languages)))
            return SimpleNamespace(languages=tuple(languages), cer=1.0 / (1 + len(languages)), gates=None)

        return run

    def test_incremental_prefixes(self, tiny_splits):
        calls = []
        curve = incremental_experiment(None, tiny_splits, ["lb", "la"], None, None, run=self._fake_run(calls))
        assert calls == [("full_pgca", ("lb",)), ("full_pgca", ("lb", "la"))]
        assert [p.k for p in curve] == [1, 2] and curve[1].cer == pytest.approx(1 / 3)

    def test_incremental_unknown_language(self, tiny_splits):
        with pytest.raises(CorpusError):
            incremental_experiment(None, tiny_splits, ["lz"], None, None, run=self._fake_run([]))

    def test_selection_rows(self):
        calls = []
        scores = {"cer": {"a": 0.2, "b": 0.1}, "proximity": {"a": 0.9, "b": 0.5}, "gating": {"a": 0.1, "b": 0.3}}
        rows = selection_experiment(scores, self._fake_run(calls))
        assert len(rows) == 6
        assert rows[0] == ("cer", 1, ("b",), 0.5)
        assert rows[2] == ("proximity", 1, ("a",), 0.5)
        assert rows[5][2] == ("b", "a")
