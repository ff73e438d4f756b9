"""Pre-train and fine-tune runs with checkpoint save / resume."""
from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Vocabulary, read_lines, tokenize
from .decoding import VocabularyMismatch
from .model import ConfigError, ModelConfig, Seq2Seq
from .seeding import STREAMS
from .training import (DenoisingTask, LRSchedule, PairTask, Trainer, ValidationRecord,
                       split_validation, unique_params)

log = logging.getLogger(__name__)

STATE_FIELDS = ("iteration", "epoch", "batch_pos", "epoch_loss_sum", "epoch_loss_count",
                "trace", "stopped", "train_indices", "valid_indices")


def to_checkpoint(trainer: Trainer, run_cfg: RunConfig, vocab: Vocabulary, kind: str) -> Checkpoint:
    params = {k: p.data for k, p in unique_params(trainer.model.params).items()}
    state = {k: getattr(trainer, k) for k in STATE_FIELDS}
    state.update(
        kind=kind,
        lr=trainer.opt.lr,
        momentum=trainer.opt.momentum,
        ema_decay=trainer.ema.decay,
        schedule=asdict(trainer.schedule),
        history=[asdict(r) for r in trainer.history],
        rng={"seed": trainer.cfg.seed, "streams": STREAMS},
        vocab_hash=vocab.content_hash(),
    )
    config = {"model": trainer.model.cfg.to_dict(), "run": run_cfg.to_text()}
    return Checkpoint(config, vocab.to_tsv(), params, dict(trainer.ema.shadow),
                      dict(trainer.opt.velocity), state)


def model_from_checkpoint(ckpt: Checkpoint, weights: str = "ema") -> Seq2Seq:
    """Rebuild the network with its EMA (default) or raw weights."""
    cfg = ModelConfig(**ckpt.config["model"])
    model = Seq2Seq(cfg, seed=0)
    arrays = ckpt.ema if weights == "ema" else ckpt.params
    load_arrays(model, arrays)
    return model


def load_arrays(model: Seq2Seq, arrays: dict) -> None:
    params = unique_params(model.params)
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ConfigError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for k, p in params.items():
        if p.data.shape != arrays[k].shape:
            raise ConfigError(f"tensor {k}: checkpoint shape {arrays[k].shape} != model {p.data.shape}")
        p.data[...] = arrays[k]


def vocab_from_checkpoint(ckpt: Checkpoint) -> Vocabulary:
    vocab = Vocabulary.from_tsv(ckpt.vocab_tsv)
    if ckpt.vocab_hash and vocab.content_hash() != ckpt.vocab_hash:
        raise VocabularyMismatch("checkpoint vocabulary does not match its stored hash")
    return vocab


def restore_trainer(trainer: Trainer, ckpt: Checkpoint) -> Trainer:
    """Load raw weights, optimizer, EMA, schedule and counters into ``trainer``."""
    load_arrays(trainer.model, ckpt.params)
    s = ckpt.state
    trainer.opt.lr = s["lr"]
    trainer.opt.momentum = s["momentum"]
    trainer.opt.velocity = {k: v.copy() for k, v in ckpt.velocity.items()}
    trainer.ema.decay = s["ema_decay"]
    trainer.ema.shadow = {k: v.copy() for k, v in ckpt.ema.items()}
    trainer.schedule = LRSchedule(**s["schedule"])
    for k in STATE_FIELDS:
        setattr(trainer, k, s[k])
    trainer.history = [ValidationRecord(**r) for r in s["history"]]
    trainer._valid_cache = None
    return trainer


def check_compatible(ckpt: Checkpoint, run_cfg: RunConfig) -> None:
    """Refuse a checkpoint whose architecture differs from the run config."""
    stored = dict(ckpt.config["model"])
    stored.pop("vocab_size", None)
    wanted = dict(run_cfg.model)
    diff = sorted(k for k in set(stored) | set(wanted) if stored.get(k) != wanted.get(k))
    if diff:
        detail = ", ".join(f"{k}: checkpoint={stored.get(k)} config={wanted.get(k)}" for k in diff)
        raise ConfigError(f"checkpoint model config does not match run config ({detail})")


class _Run:
    """Log and checkpoint side effects for a trainer writing into ``out_dir``."""

    def __init__(self, out_dir, run_cfg: RunConfig, vocab: Vocabulary, kind: str):
        self.out = Path(out_dir) if out_dir is not None else None
        self.run_cfg, self.vocab, self.kind = run_cfg, vocab, kind
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "config.cfg").write_text(run_cfg.to_text(), encoding="utf-8")
            vocab.save(self.out / "vocab.tsv")

    def on_validate(self, rec: ValidationRecord) -> None:
        log.info("validation %s", rec.log_line())
        if self.out is not None:
            with open(self.out / "train.log", "a", encoding="utf-8") as f:
                f.write(rec.log_line() + "\n")

    def on_checkpoint(self, trainer: Trainer) -> None:
        if self.out is not None:
            save_checkpoint(to_checkpoint(trainer, self.run_cfg, self.vocab, self.kind),
                            self.out / f"checkpoint_{trainer.iteration:08d}.poda")

    def finish(self, trainer: Trainer) -> None:
        if self.out is not None:
            save_checkpoint(to_checkpoint(trainer, self.run_cfg, self.vocab, self.kind),
                            self.out / "last.poda")


def make_pretrainer(segments: Sequence[Sequence[str]], vocab: Vocabulary, run_cfg: RunConfig,
                    model: Seq2Seq | None = None) -> Trainer:
    task = DenoisingTask(segments, vocab, run_cfg.noise_config())
    cfg = run_cfg.train_config()
    if model is None:
        model = Seq2Seq(run_cfg.model_config(len(vocab)), seed=cfg.seed)
    valid = split_validation(len(task.segments), run_cfg.data.valid_fraction, cfg.seed)
    return Trainer(model, task, cfg, valid_indices=valid)


def pretrain(segments, vocab: Vocabulary, run_cfg: RunConfig, out_dir=None,
             resume: Checkpoint | str | Path | None = None, until_iteration: int | None = None,
             model: Seq2Seq | None = None) -> Trainer:
    """Denoising pre-training; writes config, log and checkpoints to ``out_dir``."""
    trainer = make_pretrainer(segments, vocab, run_cfg, model)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.vocab_hash != vocab.content_hash():
            raise VocabularyMismatch("resume checkpoint was trained with a different vocabulary")
        restore_trainer(trainer, ckpt)
    run = _Run(out_dir, run_cfg, vocab, "pretrain")
    log.info("pre-training on %d segments (%d held out), vocabulary %d",
             len(trainer.train_indices), len(trainer.valid_indices), len(vocab))
    trainer.run(until_iteration, run.on_validate, run.on_checkpoint)
    run.finish(trainer)
    return trainer


def make_finetuner(model: Seq2Seq, pairs, vocab: Vocabulary, run_cfg: RunConfig,
                   valid_pairs=None) -> Trainer:
    cfg = run_cfg.train_config()
    pairs = list(pairs)
    if valid_pairs is not None:
        task = PairTask(pairs + list(valid_pairs), vocab)
        n = len(pairs)
        return Trainer(model, task, cfg, valid_indices=range(n, len(task.examples)),
                       train_indices=range(n))
    task = PairTask(pairs, vocab)
    valid = split_validation(len(pairs), run_cfg.data.valid_fraction, cfg.seed)
    return Trainer(model, task, cfg, valid_indices=valid)


def finetune(ckpt: Checkpoint | str | Path, pairs, run_cfg: RunConfig, valid_pairs=None,
             vocab: Vocabulary | None = None, out_dir=None, until_iteration: int | None = None,
             max_epochs: int | None = None) -> Trainer:
    """Fine-tune from a checkpoint's raw weights with the word-level NLL."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    check_compatible(ckpt, run_cfg)
    ck_vocab = vocab_from_checkpoint(ckpt)
    if vocab is not None and vocab.content_hash() != ck_vocab.content_hash():
        raise VocabularyMismatch("dataset vocabulary differs from the checkpoint vocabulary")
    model = model_from_checkpoint(ckpt, weights="raw")
    trainer = make_finetuner(model, pairs, ck_vocab, run_cfg, valid_pairs)
    run = _Run(out_dir, run_cfg, ck_vocab, "finetune")
    trainer.run(until_iteration, run.on_validate, run.on_checkpoint, max_epochs=max_epochs)
    run.finish(trainer)
    return trainer


def initial_checkpoint(model: Seq2Seq, vocab: Vocabulary, run_cfg: RunConfig) -> Checkpoint:
    """Checkpoint of an untrained model, for fine-tuning from random init."""
    trainer = Trainer(model, PairTask([(["x"], ["x"])], vocab), run_cfg.train_config())
    return to_checkpoint(trainer, run_cfg, vocab, "init")


def read_pairs(path) -> list[tuple[list[str], list[str]]]:
    pairs = []
    for lineno, line in enumerate(read_lines(path), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'source<TAB>target'")
        src, tgt = line.split("\t", 1)
        pairs.append((tokenize(src), tokenize(tgt)))
    return pairs


def ensemble_models(paths) -> tuple[list[Seq2Seq], Vocabulary, RunConfig]:
    """Load checkpoints for ensembling; all must share architecture and vocabulary."""
    ckpts = [load_checkpoint(p) for p in paths]
    first = ckpts[0]
    for p, c in zip(paths, ckpts):
        if c.config["model"] != first.config["model"]:
            raise ConfigError(f"{p}: model config differs from {paths[0]}")
        if c.vocab_hash != first.vocab_hash:
            raise VocabularyMismatch(f"{p}: vocabulary hash differs from {paths[0]}")
    vocab = vocab_from_checkpoint(first)
    run_cfg = RunConfig.from_text(first.config["run"])
    return [model_from_checkpoint(c) for c in ckpts], vocab, run_cfg


def as_arrays(model: Seq2Seq) -> dict:
    return {k: np.array(p.data) for k, p in unique_params(model.params).items()}
