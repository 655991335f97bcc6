"""ExperimentManager drives a run directory through its phases.

Each phase runs inside ``_phase``: a failure is re-raised as PhaseError naming
the phase, after the manifest is written with ``status = "incomplete"``.
Stage-1 and stage-2 checkpoints carry a fingerprint of everything that
shaped them and are reused when the fingerprint matches.
"""

import hashlib
import json
import logging
import os
from contextlib import contextmanager

from pgca.core.errors import ConfigError, PhaseError
from pgca.corpus.synth import CorpusSplits, build_embedder, corpus_summary, gen_corpus
from pgca.lab.analysis import (
    RunResult,
    attention_heatmap,
    extract_gates,
    incremental_experiment,
    noise_sweep,
    proximity_table,
    select_topk,
    selection_experiment,
)
from pgca.lab.config import write_resolved
from pgca.lab.evaluation import evaluate, evaluate_free_running
from pgca.lab.manifest import RunManifest
from pgca.lab.reports import write_csv
from pgca.lab.storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from pgca.lab.training import train_stage1, train_stage2

logger = logging.getLogger(__name__)

# Fusion variants in ablation-table order.
ABLATION_IDS = (
    ("A6", "full_pgca"),
    ("A7", "no_tanh"),
    ("A8", "sequential"),
    ("A9", "shared"),
    ("A10", "addition"),
    ("A11", "concatenation"),
)


def run_id(fusion_mode, languages):
    return f"{fusion_mode}__{'+'.join(languages)}"


def _fingerprint(*parts):
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode("utf-8")).hexdigest()


class ExperimentManager:
    def __init__(self, config):
        # Rejected before any directory is touched.
        config.validate(strict=True)
        self.config = config
        self.out_dir = config.out_dir
        self.manifest = RunManifest.open(self.out_dir)
        self.corpus_cfg = config.corpus_config()
        self.embedder = build_embedder(self.corpus_cfg)
        self._splits = None
        self._stage1 = None
        self._baseline_cer = None
        self._runs = {}

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    @contextmanager
    def _phase(self, name):
        logger.info("phase %s: start", name)
        try:
            yield
        except PhaseError:
            raise
        except Exception as e:
            self.manifest.write("incomplete", failed_phase=name)
            raise PhaseError(name, e) from e
        self.manifest.phase_done(name)
        logger.info("phase %s: done", name)

    def _record(self, path):
        self.manifest.record(path)
        return path

    def finish(self):
        return self.manifest.write("complete")

    def write_resolved(self):
        return self._record(write_resolved(self.config, self.path("resolved.ini")))

    # -- data -------------------------------------------------------------

    def _stored_split(self, split):
        path = self.path("data", f"{split}.bin")
        if not os.path.isfile(path):
            return None
        dataset = load_dataset(path)
        if dataset.config_digest != self.corpus_cfg.digest():
            logger.info("stored %s split was generated from another corpus config; regenerating", split)
            return None
        return dataset

    def corpus(self):
        if self._splits is not None:
            return self._splits
        with self._phase("gen-data"):
            train, test = self._stored_split("train"), self._stored_split("test")
            if train is None or test is None:
                splits = gen_corpus(self.corpus_cfg)
                save_dataset(splits.train, self.path("data", "train.bin"))
                save_dataset(splits.test, self.path("data", "test.bin"))
            else:
                logger.info("loaded stored corpus from %s", self.path("data"))
                splits = CorpusSplits(train, test)
            self._record(self.path("data", "train.bin"))
            self._record(self.path("data", "test.bin"))
            summary = self.path("data", "corpus_summary.txt")
            with open(summary, "w") as f:
                f.write(corpus_summary(splits, self.corpus_cfg))
            self._record(summary)
        self._splits = splits
        return splits

    # -- training ---------------------------------------------------------

    def _stage1_fingerprint(self):
        return _fingerprint(self.corpus_cfg.digest(), self.config.model_config().as_dict(), self.config.stage1_hyper().as_dict())

    def _reusable(self, path, fingerprint):
        if not os.path.isfile(path):
            return None
        ckpt = load_checkpoint(path)
        return ckpt if ckpt.meta.get("fingerprint") == fingerprint else None

    def stage1(self):
        if self._stage1 is not None:
            return self._stage1
        splits = self.corpus()
        with self._phase("stage1"):
            path = self.path("checkpoints", "stage1.ckpt")
            fingerprint = self._stage1_fingerprint()
            ckpt = self._reusable(path, fingerprint)
            if ckpt is None:
                ckpt = train_stage1(
                    splits,
                    self.config.model_config(),
                    self.config.stage1_hyper(),
                    log_path=self.path("logs", "stage1.csv"),
                    workers=self.config.workers,
                    debug=self.config.debug,
                )
                ckpt.meta["fingerprint"] = fingerprint
                save_checkpoint(ckpt, path)
            else:
                logger.info("reusing stage-1 checkpoint %s", path)
            self._record(path)
            if os.path.isfile(self.path("logs", "stage1.csv")):
                self._record(self.path("logs", "stage1.csv"))
        self._stage1 = ckpt
        return ckpt

    def baseline_cer(self):
        if self._baseline_cer is None:
            report = self._evaluate_and_report("stage1", self.stage1(), embedder=None)
            self._baseline_cer = report.cer
        return self._baseline_cer

    def run_stage2(self, fusion_mode, languages):
        """Trained (or reused) stage-2 run for (mode, languages), evaluated on
        the test split. Repeated requests share one run."""
        languages = tuple(languages)
        key = (fusion_mode, languages)
        if key in self._runs:
            return self._runs[key]
        stage1 = self.stage1()
        splits = self.corpus()
        rid = run_id(fusion_mode, languages)
        with self._phase(f"stage2:{rid}"):
            path = self.path("checkpoints", f"{rid}.ckpt")
            hyper = self.config.stage2_hyper()
            fingerprint = _fingerprint(self._stage1_fingerprint(), fusion_mode, list(languages), hyper.as_dict())
            ckpt = self._reusable(path, fingerprint)
            if ckpt is None:
                cfg = stage1.config.with_fusion(fusion_mode, languages)
                ckpt = train_stage2(
                    stage1,
                    splits,
                    cfg,
                    hyper,
                    self.embedder,
                    log_path=self.path("logs", f"{rid}.csv"),
                    workers=self.config.workers,
                    debug=self.config.debug,
                )
                ckpt.meta["fingerprint"] = fingerprint
                save_checkpoint(ckpt, path)
            else:
                logger.info("reusing stage-2 checkpoint %s", path)
            self._record(path)
            if os.path.isfile(self.path("logs", f"{rid}.csv")):
                self._record(self.path("logs", f"{rid}.csv"))
        report = self._evaluate_and_report(rid, ckpt, self.embedder)
        gates = extract_gates(ckpt) if ckpt.config.is_gated else None
        result = RunResult(fusion_mode, languages, ckpt, report.cer, gates)
        self._runs[key] = result
        return result

    # -- evaluation and reports -------------------------------------------

    def _evaluate_and_report(self, name, ckpt, embedder):
        with self._phase(f"evaluate:{name}"):
            report = evaluate(ckpt, self.corpus().test, embedder, baseline_cer=self._baseline_cer, workers=self.config.workers)
            rows = [(uid, e.substitutions, e.deletions, e.insertions, e.ref_chars, e.cer) for uid, e in report.per_utterance]
            rows.append(("corpus", report.substitutions, report.deletions, report.insertions, report.ref_chars, report.cer))
            self._record(write_csv(self.path("reports", f"cer_{name}.csv"), "cer_report", rows))
        logger.info("%s: test CER %.4f", name, report.cer)
        return report

    def _report(self, filename, kind, rows, header=None):
        with self._phase("report"):
            return self._record(write_csv(self.path("reports", filename), kind, rows, header))

    def single_language_cers(self):
        return {lang: self.run_stage2(self.config.fusion_mode, (lang,)).cer for lang in self.config.aux_languages}

    def evaluate_existing(self):
        """Scores every checkpoint already in the run directory, teacher-forced
        and free-running; the pair lands in ``decoding.csv``."""
        directory = self.path("checkpoints")
        if not os.path.isdir(directory):
            raise PhaseError("evaluate", FileNotFoundError(f"no checkpoints under {directory}"))
        results, comparison = {}, []
        if os.path.isfile(os.path.join(directory, "stage1.ckpt")):
            self._stage1 = load_checkpoint(os.path.join(directory, "stage1.ckpt"))
            results["stage1"] = self.baseline_cer()
            comparison.append(("stage1", results["stage1"], self._free_running_cer("stage1", self._stage1, None)))
        for filename in sorted(os.listdir(directory)):
            if not filename.endswith(".ckpt") or filename == "stage1.ckpt":
                continue
            name = filename[: -len(".ckpt")]
            ckpt = load_checkpoint(os.path.join(directory, filename))
            results[name] = self._evaluate_and_report(name, ckpt, self.embedder).cer
            comparison.append((name, results[name], self._free_running_cer(name, ckpt, self.embedder)))
        if comparison:
            self._report("decoding.csv", "decoding", comparison)
        return results

    def _free_running_cer(self, name, ckpt, embedder):
        with self._phase(f"evaluate:{name}"):
            return evaluate_free_running(ckpt, self.corpus().test, embedder, workers=self.config.workers).cer

    # -- presets ----------------------------------------------------------

    def baseline(self):
        """A0 stage-1, one run per language, one run with all of them."""
        langs = self.config.aux_languages
        base = self.baseline_cer()
        rows = [("A0", (), base, None)]
        for i, lang in enumerate(langs, start=1):
            result = self.run_stage2(self.config.fusion_mode, (lang,))
            rows.append((f"A{i}", (lang,), result.cer, (base - result.cer) / base if base else None))
        if len(langs) > 1:
            result = self.run_stage2(self.config.fusion_mode, langs)
            rows.append((f"A{len(langs) + 1}", langs, result.cer, (base - result.cer) / base if base else None))
        self._report("table2.csv", "table2", rows)
        self.analyze(self.run_stage2(self.config.fusion_mode, langs))
        return rows

    def ablation(self):
        langs = self.config.aux_languages
        self.baseline_cer()
        rows = [(ablation_id, mode, self.run_stage2(mode, langs).cer) for ablation_id, mode in ABLATION_IDS]
        self._report("table3.csv", "table3", rows)
        return rows

    def sweep(self):
        """Languages added best-first by their single-language CER."""
        self.baseline_cer()
        order = select_topk(self.single_language_cers(), "cer", len(self.config.aux_languages))
        with self._phase("sweep"):
            curve = incremental_experiment(
                self.stage1(), self.corpus(), order, self.config.stage2_hyper(), self.embedder, self.config.fusion_mode, run=self.run_stage2
            )
        self._report("curve.csv", "curve", [(p.k, p.languages, p.cer) for p in curve])
        return curve

    def selection(self):
        langs = self.config.aux_languages
        self.baseline_cer()
        scores = {"cer": self.single_language_cers()}
        with self._phase("analyze"):
            proximity = proximity_table(self.corpus().test, self.embedder, langs)
        scores["proximity"] = {lang: to_target for lang, to_target, _ in proximity}
        scores["gating"] = self.run_stage2(self.config.fusion_mode, langs).gates.mean_by_language()
        with self._phase("selection"):
            rows = selection_experiment(scores, self.run_stage2, self.config.fusion_mode)
        self._report("selection.csv", "selection", rows)
        return rows

    def noise(self):
        lang = self.config.noise_language or self.config.aux_languages[0]
        self.baseline_cer()
        with self._phase("noise"):
            rows = noise_sweep(
                self.stage1(),
                self.corpus_cfg,
                lang,
                self.config.noise_rates,
                self.config.stage2_hyper(),
                self.embedder,
                self.config.fusion_mode,
                workers=self.config.workers,
            )
        self._report("noise_sweep.csv", "noise_sweep", rows)
        return rows

    def analyze(self, result=None):
        """Gate report, head-averaged heatmaps on the first test utterance and
        the proximity table for the main run."""
        langs = self.config.aux_languages
        with self._phase("analyze"):
            if result is None:
                name = "stage1" if self.config.fusion_mode == "none" else run_id(self.config.fusion_mode, langs)
                path = self.path("checkpoints", f"{name}.ckpt")
                if not os.path.isfile(path):
                    raise FileNotFoundError(f"no checkpoint {path}; run 'train' first")
                ckpt = load_checkpoint(path)
            else:
                ckpt = result.checkpoint
            rid = run_id(ckpt.config.fusion_mode, ckpt.config.aux_languages)
            pivot = self.config.pivot or None
            rows = proximity_table(self.corpus().test, self.embedder, langs, pivot=pivot)
            self._record(write_csv(self.path("reports", "proximity.csv"), "proximity", rows))
            if ckpt.config.is_gated:
                gates = extract_gates(ckpt)
                self._record(write_csv(self.path("reports", f"gates_{rid}.csv"), "gate_report", gates.rows()))
                u = self.corpus().test[0]
                for lang in ckpt.config.aux_languages:
                    heatmap = attention_heatmap(ckpt, u, gates.default_layer, lang, self.embedder)
                    filename = f"heatmap_{rid}_L{gates.default_layer}_{lang}.csv"
                    self._record(write_csv(self.path("reports", filename), "heatmap", heatmap.rows(), heatmap.header()))
        return ckpt

    def train(self):
        self.baseline_cer()
        if self.config.fusion_mode == "none":
            return self.stage1()
        return self.run_stage2(self.config.fusion_mode, self.config.aux_languages).checkpoint


PRESET_RUNNERS = {
    "baseline": ExperimentManager.baseline,
    "ablation": ExperimentManager.ablation,
    "sweep": ExperimentManager.sweep,
    "selection": ExperimentManager.selection,
    "noise": ExperimentManager.noise,
}


def run_experiment(config):
    """Runs ``config.preset`` end to end and returns the run directory."""
    runner = PRESET_RUNNERS.get(config.preset)
    if runner is None:
        raise ConfigError(f"Unknown preset: {config.preset!r}")
    manager = ExperimentManager(config)
    manager.write_resolved()
    runner(manager)
    manager.finish()
    logger.info("run complete: %s", config.out_dir)
    return config.out_dir
