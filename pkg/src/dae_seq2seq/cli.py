"""Command-line entry points.

Each subcommand exits 0 on success; failures print one diagnostic line to
stderr and exit with a code identifying the failure class (see EXIT_CODES).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import corpus, noising, workflow
from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, preset
from .decoding import VocabularyMismatch, decode_text
from .evaluation import corpus_rouge, format_report, perplexity
from .model import ConfigError
from .seeding import derive_rng
from .training import PairTask

log = logging.getLogger("dae_seq2seq")

EXIT_CODES = {
    "error": 1,
    "usage": 2,
    "missing-file": 3,
    "config": 4,
    "vocab-mismatch": 5,
    "checkpoint": 6,
    "data": 7,
}


class DataError(ValueError):
    pass


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = preset(getattr(args, "preset", None) or "desk")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    log.info("resolved config:\n%s", cfg.to_text())
    return cfg


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(p)


def _tokens(paths):
    for line in corpus.read_lines(paths):
        yield from corpus.tokenize(line)


def _vocab(args, cfg: RunConfig, corpus_paths) -> corpus.Vocabulary:
    if getattr(args, "vocab", None):
        _require(args.vocab)
        return corpus.Vocabulary.load(args.vocab)
    return corpus.build_vocab(_tokens(corpus_paths), cfg.data.vocab_max_size)


def _segments(args, cfg, vocab):
    segs = corpus.preprocess(corpus.read_lines(args.corpus), vocab, cfg.data.mode,
                             cfg.data.segment_len, cfg.data.sentence_max)
    if not segs:
        raise DataError("corpus is empty after filtering")
    return segs


# ------------------------------------------------------------------ commands

def cmd_build_vocab(args):
    _require(*args.corpus)
    cfg = _config(args)
    size = args.max_size or cfg.data.vocab_max_size
    vocab = corpus.build_vocab(_tokens(args.corpus), size)
    vocab.save(args.out)
    print(f"wrote {len(vocab.words)} words to {args.out}", file=sys.stderr)


def cmd_preprocess(args):
    _require(*args.corpus)
    cfg = _config(args)
    vocab = _vocab(args, cfg, args.corpus)
    segs = _segments(args, cfg, vocab)
    with open(args.out, "w", encoding="utf-8") as f:
        for s in segs:
            f.write(" ".join(s) + "\n")
    print(f"wrote {len(segs)} segments to {args.out}", file=sys.stderr)


def cmd_noise_preview(args):
    _require(*args.corpus)
    cfg = _config(args)
    vocab = _vocab(args, cfg, args.corpus)
    noise = cfg.noise_config()
    unigram = noising.Unigram.from_vocab(vocab)
    segs = _segments(args, cfg, vocab)[: args.limit]
    for i, seg in enumerate(segs):
        ex = noising.apply_noise(seg, noise, unigram, derive_rng(cfg.seed, "noise", i))
        sys.stdout.write(noising.preview_line(ex) + "\n")


def cmd_pretrain(args):
    _require(*args.corpus)
    cfg = _config(args)
    if args.iterations is not None:
        cfg.train.max_iterations = args.iterations
    vocab = _vocab(args, cfg, args.corpus)
    segs = _segments(args, cfg, vocab)
    trainer = workflow.pretrain(segs, vocab, cfg, out_dir=args.out, resume=args.resume)
    print(f"pre-training stopped at iteration {trainer.iteration}; checkpoints in {args.out}",
          file=sys.stderr)


def cmd_finetune(args):
    _require(args.checkpoint, args.train, args.valid, args.vocab)
    cfg = _config(args)
    if args.iterations is not None:
        cfg.train.max_iterations = args.iterations
    ckpt = load_checkpoint(args.checkpoint)
    pairs = workflow.read_pairs(args.train)
    valid = workflow.read_pairs(args.valid) if args.valid else None
    vocab = corpus.Vocabulary.load(args.vocab) if args.vocab else None
    trainer = workflow.finetune(ckpt, pairs, cfg, valid, vocab=vocab, out_dir=args.out)
    print(f"fine-tuning stopped at iteration {trainer.iteration}; checkpoints in {args.out}",
          file=sys.stderr)


def ensemble_decode(checkpoints, lines, beam=None, max_len=None, tsv=False):
    """Decode each input line with the probability-averaged ensemble."""
    models, vocab, cfg = workflow.ensemble_models(checkpoints)
    beam = beam or cfg.decode.beam
    max_len = max_len or cfg.decode.max_len
    out = []
    for line in lines:
        words, res = decode_text(models, corpus.tokenize(line), vocab, beam, max_len,
                                 cfg.decode.length_alpha)
        text = " ".join(words)
        out.append(f"{text}\t{res.scores[0]:.6f}" if tsv else text)
    return out


def cmd_decode(args):
    _require(*args.checkpoint, args.input)
    lines = list(corpus.read_lines(args.input))
    for line in ensemble_decode(args.checkpoint, lines, args.beam, args.max_len, args.tsv):
        sys.stdout.write(line + "\n")


def cmd_evaluate(args):
    _require(args.hypotheses, args.references, args.checkpoint, args.pairs)
    hyps = [corpus.tokenize(l) for l in corpus.read_lines(args.hypotheses)]
    refs = [corpus.tokenize(l) for l in corpus.read_lines(args.references)]
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    ppl = None
    if args.checkpoint and args.pairs:
        models, vocab, _ = workflow.ensemble_models([args.checkpoint])
        ppl = perplexity(models[0], PairTask(workflow.read_pairs(args.pairs), vocab).examples)
    sys.stdout.write(format_report(corpus_rouge(hyps, refs), ppl))


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dae-seq2seq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus_arg=True):
        sp.add_argument("--config", help="config file (key = value, one section per module)")
        sp.add_argument("--preset", choices=["desk", "paper"], help="preset when no --config")
        sp.add_argument("--seed", type=int)
        if corpus_arg:
            sp.add_argument("--corpus", nargs="+", required=True, help="UTF-8 text (.gz ok)")
            sp.add_argument("--vocab", help="vocabulary TSV (built from the corpus if absent)")

    sp = sub.add_parser("build-vocab", help="count words and write the vocabulary TSV")
    common(sp)
    sp.add_argument("--max-size", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_vocab)

    sp = sub.add_parser("preprocess", help="filter and segment a corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("noise-preview", help="print clean/noisy/mask TSV lines")
    common(sp)
    sp.add_argument("--limit", type=int, default=20)
    sp.set_defaults(func=cmd_noise_preview)

    sp = sub.add_parser("pretrain", help="denoising pre-training")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune a checkpoint on source<TAB>target pairs")
    common(sp, corpus_arg=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid")
    sp.add_argument("--vocab", help="refuse to run unless this matches the checkpoint vocabulary")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("decode", help="beam-search decode; repeat --checkpoint to ensemble")
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--tsv", action="store_true", help="append the normalized score")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("evaluate", help="ROUGE-1/2/L and optional perplexity")
    sp.add_argument("--hypotheses", required=True)
    sp.add_argument("--references", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--pairs", help="source<TAB>target pairs for perplexity")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except FileNotFoundError as e:
        return _fail("missing-file", f"file not found: {e.filename or e}")
    except VocabularyMismatch as e:
        return _fail("vocab-mismatch", f"vocabulary mismatch: {e}")
    except ConfigError as e:
        return _fail("config", f"config error: {e}")
    except CheckpointError as e:
        return _fail("checkpoint", f"checkpoint error: {e}")
    except (DataError, noising.NoiseConfigError) as e:
        return _fail("data" if isinstance(e, DataError) else "config", str(e))
    except ValueError as e:
        return _fail("data", f"invalid input: {e}")
    return 0


def _fail(kind: str, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
