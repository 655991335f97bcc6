"""Two-stage trainer: teacher-forced cross-entropy, AdamW, warm-up schedule.

Stage 1 updates every parameter of the plain encoder-decoder. Stage 2 starts
from a stage-1 checkpoint, adds fusion layers and updates only those; the
frozen manifest is checked bitwise at the end of every run (and every step
with ``debug=True``).
"""

import logging

import numpy as np

from pgca.core import tensor as T
from pgca.core.errors import (
    ConfigError,
    CorpusError,
    DimensionError,
    FrozenParameterError,
    NonFiniteError,
    TrainingDivergedError,
)
from pgca.core.rng import make_rng
from pgca.lab.evaluation import evaluate
from pgca.lab.optim import OptState, adamw_step, clip_gradients, lr_schedule
from pgca.lab.reports import CsvLog, format_gates
from pgca.model.fusion import gate_table, orient_gates
from pgca.model.network import aux_streams, encode_audio, extend_for_stage2, init_checkpoint, model_forward

logger = logging.getLogger(__name__)


def target_ids(tokens, config):
    return np.concatenate([np.asarray(tokens, dtype=np.int64), [config.eos]])


def _nll_sum(logits, targets):
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise DimensionError(f"{logits.shape[0]} logit rows for {len(targets)} targets")
    return T.mul_const(T.sum_all(T.pick(T.log_softmax(logits), targets)), -1.0)


def cross_entropy_loss(logits, targets):
    """Mean over positions of -log softmax(logits)[target]."""
    return T.mul_const(_nll_sum(logits, targets), 1.0 / len(targets))


class BatchSampler:
    """Seeded per-epoch shuffles, consumed in order; no length bucketing."""

    def __init__(self, size, batch_size, seed, stage):
        self.size = size
        self.batch_size = batch_size
        self.rng = make_rng(seed, "batches", stage)
        self.order = []

    def next_batch(self):
        batch = []
        while len(batch) < self.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(self.size))
            batch.append(int(self.order.pop(0)))
        return batch


class Trainer:
    def __init__(self, ckpt, hp, train_set, eval_set=None, embedder=None, log_path=None, workers=1, debug=False):
        hp.validate(strict=True)
        if len(train_set) == 0:
            raise CorpusError("cannot train on an empty dataset")
        self.ckpt = ckpt
        self.hp = hp
        self.train_set = train_set
        self.eval_set = eval_set
        self.embedder = embedder
        self.log_path = log_path
        self.workers = workers
        self.debug = debug
        self.config = ckpt.config
        self._audio_cache = {}
        self._aux_cache = {}
        self.gate_history = []

        ckpt.params.set_trainable(ckpt.frozen)
        self.trainable = ckpt.params.trainable()
        if ckpt.opt_state is None:
            ckpt.opt_state = OptState.zeros(self.trainable)
        self._frozen_snapshot = {name: ckpt.params[name].data.tobytes() for name in ckpt.frozen}

    def _inputs(self, u):
        """Frozen encoder output and auxiliary streams are cached in stage 2."""
        if self.ckpt.stage != 2:
            return None, None
        if u.id not in self._audio_cache:
            with T.no_grad():
                self._audio_cache[u.id] = encode_audio(u.audio, self.ckpt.params, self.config)
            self._aux_cache[u.id] = aux_streams(u, self.config, self.embedder)
        return self._audio_cache[u.id], self._aux_cache[u.id]

    def batch_loss(self, batch):
        total, count = None, 0
        for index in batch:
            u = self.train_set[index]
            audio_states, aux = self._inputs(u)
            logits = model_forward(u, self.ckpt, u.target, embedder=self.embedder, aux=aux, audio_states=audio_states)
            nll = _nll_sum(logits, target_ids(u.target, self.config))
            total = nll if total is None else total + nll
            count += len(u.target) + 1
        return T.mul_const(total, 1.0 / count)

    def check_frozen(self):
        for name, expected in self._frozen_snapshot.items():
            if self.ckpt.params[name].data.tobytes() != expected:
                raise FrozenParameterError(f"frozen parameter {name!r} changed during stage-{self.ckpt.stage} training")

    def _evaluate(self):
        if self.eval_set is None or len(self.eval_set) == 0:
            return None
        return evaluate(self.ckpt, self.eval_set, self.embedder, workers=self.workers, limit=self.hp.eval_limit).cer

    def run(self):
        hp, ckpt = self.hp, self.ckpt
        sampler = BatchSampler(len(self.train_set), hp.batch_size, hp.seed, ckpt.stage)
        log = CsvLog(self.log_path, "train_log") if self.log_path else None

        best_cer = self._evaluate()
        best = ckpt.copy()
        best.meta.update({"best_step": 0, "best_cer": best_cer})
        gates = gate_table(ckpt.params, self.config)
        self.gate_history.append((0, gates))
        if log:
            log.append([0, 0.0, None, best_cer, format_gates(gates)])

        try:
            for step in range(1, hp.total_steps + 1):
                lr = lr_schedule(step, hp)
                ckpt.params.zero_grad()
                try:
                    loss = self.batch_loss(sampler.next_batch())
                    if not np.isfinite(loss.item()):
                        raise NonFiniteError(f"loss is {loss.item()}")
                    T.backward(loss)
                    clip_gradients(self.trainable, hp.clip_norm)
                    adamw_step(self.trainable, ckpt.opt_state, hp, lr, frozen=ckpt.frozen)
                    orient_gates(ckpt.params, self.config, ckpt.opt_state)
                except NonFiniteError as e:
                    raise TrainingDivergedError(f"stage-{ckpt.stage} training diverged at step {step}: {e}", last_good=best) from e
                ckpt.step = step
                if self.debug:
                    self.check_frozen()

                eval_cer = None
                if step % hp.eval_every == 0 or step == hp.total_steps:
                    eval_cer = self._evaluate()
                    # Strictly lower wins, so ties keep the earliest step.
                    if eval_cer is not None and (best_cer is None or eval_cer < best_cer):
                        best_cer = eval_cer
                        best = ckpt.copy()
                        best.meta.update({"best_step": step, "best_cer": eval_cer})
                    logger.info("stage %d step %d: loss %.4f, eval CER %s", ckpt.stage, step, loss.item(), eval_cer)

                gates = gate_table(ckpt.params, self.config)
                if gates:
                    self.gate_history.append((step, gates))
                if log:
                    log.append([step, lr, loss.item(), eval_cer, format_gates(gates)])
                logger.debug("stage %d step %d lr %.3e loss %.6f", ckpt.stage, step, lr, loss.item())
        finally:
            if log:
                log.close()

        self.check_frozen()
        if self.eval_set is None or len(self.eval_set) == 0:
            best = ckpt.copy()
            best.meta.update({"best_step": ckpt.step, "best_cer": None})
        best.meta["final_step"] = ckpt.step
        logger.info("stage %d finished: best step %s, CER %s", ckpt.stage, best.meta["best_step"], best.meta["best_cer"])
        return best


def train_stage1(splits, cfg, hp, log_path=None, workers=1, debug=False):
    if cfg.has_fusion:
        raise ConfigError(f"stage 1 trains without fusion, got fusion_mode={cfg.fusion_mode!r}")
    ckpt = init_checkpoint(cfg, hp.seed)
    return Trainer(ckpt, hp, splits.train, splits.test, log_path=log_path, workers=workers, debug=debug).run()


def train_stage2(stage1, splits, cfg, hp, embedder, log_path=None, workers=1, debug=False):
    """``cfg`` supplies the fusion mode and the ordered auxiliary languages."""
    if stage1.stage != 1:
        raise ConfigError(f"stage 2 resumes from a stage-1 checkpoint, got stage {stage1.stage}")
    if not cfg.has_fusion:
        raise ConfigError("stage 2 needs a fusion mode other than 'none'")
    if len(splits.train):
        missing = [lang for lang in cfg.aux_languages if lang not in splits.train[0].aux]
        if missing:
            raise CorpusError(f"training data has no auxiliary streams for {missing}")
    ckpt = extend_for_stage2(stage1, cfg.fusion_mode, cfg.aux_languages, hp.seed)
    trainer = Trainer(ckpt, hp, splits.train, splits.test, embedder=embedder, log_path=log_path, workers=workers, debug=debug)
    best = trainer.run()
    best.meta["gate_history_len"] = len(trainer.gate_history)
    return best
