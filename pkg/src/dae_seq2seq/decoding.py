"""Length-normalized beam search with probability-averaging ensembles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, Vocabulary, decode_ids, encode_extended
from .model import Seq2Seq


class VocabularyMismatch(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float = 1.0) -> float:
        return self.logprob / max(self.length, 1) ** alpha

    def output_ids(self) -> list[int]:
        ids = self.tokens[1:]
        return ids[:-1] if self.finished else ids


@dataclass
class DecodeResult:
    hypotheses: list[Hypothesis]
    truncated: bool = False
    scores: list[float] = field(default_factory=list)

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def ensemble_step_probs(prob_list: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-model next-token distributions."""
    shapes = {p.shape for p in prob_list}
    if len(shapes) != 1:
        raise VocabularyMismatch(f"ensemble members disagree on vocabulary size: {sorted(shapes)}")
    if len(prob_list) == 1:
        return prob_list[0]
    return np.mean(np.stack(prob_list), axis=0)


class EnsembleScorer:
    """Encodes one source with every model and scores prefix batches."""

    def __init__(self, models: Sequence[Seq2Seq], src_ext: Sequence[int], n_ext: int | None = None):
        if not models:
            raise ValueError("need at least one model")
        sizes = {m.cfg.vocab_size for m in models}
        if len(sizes) != 1:
            raise VocabularyMismatch(f"ensemble members have vocabulary sizes {sorted(sizes)}")
        self.models = list(models)
        self.src = np.asarray(src_ext, dtype=np.int64)[None]
        V = models[0].cfg.vocab_size
        self.n_ext = n_ext if n_ext is not None else max(V, int(self.src.max()) + 1)
        with ad.no_grad():
            self.h_enc = [m.encode(self.src) for m in self.models]

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        return ensemble_step_probs([
            m.step_probs(h, prefixes, self.src, self.n_ext) for m, h in zip(self.models, self.h_enc)
        ])


def beam_search(models, src_ext: Sequence[int], beam_size: int = 4, max_len: int = 64,
                n_ext: int | None = None, length_alpha: float = 1.0, min_len: int = 1,
                exact: bool = True, step_fn=None) -> DecodeResult:
    """Decode one source; hypotheses are ranked by length-normalized log-prob.

    ``max_len`` bounds the generated length including EOS.  Each step ranks
    all extensions by cumulative log-probability (ties to the lower token
    id, then the earlier parent).  EOS extensions ranked within the top
    ``beam_size`` move to the finished pool; the live beam is refilled with
    the best ``beam_size`` non-EOS extensions, so finished hypotheses never
    take beam slots.  With ``exact=True`` (default) the search stops once
    ``beam_size`` hypotheses have finished and no live hypothesis can still
    beat them: a live prefix with log-prob ``lp`` scores at most
    ``lp / max_len**length_alpha``.  ``exact=False`` stops as soon as
    ``beam_size`` hypotheses have finished.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    if step_fn is None:
        if isinstance(models, Seq2Seq):
            models = [models]
        step_fn = EnsembleScorer(models, src_ext, n_ext)
    live = [Hypothesis([BOS], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(max_len):
        probs = step_fn(np.array([h.tokens for h in live], dtype=np.int64))
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        if step + 1 < min_len:
            logp[:, EOS] = -np.inf
        total = np.array([h.logprob for h in live])[:, None] + logp
        n_vocab = total.shape[1]
        flat = total.reshape(-1)
        tok = np.tile(np.arange(n_vocab), len(live))
        parent = np.repeat(np.arange(len(live)), n_vocab)
        ok = np.isfinite(flat)
        flat, tok, parent = flat[ok], tok[ok], parent[ok]
        order = np.lexsort((parent, tok, -flat))
        new_live = []
        for rank, j in enumerate(order):
            if tok[j] == EOS:
                if rank < beam_size:
                    finished.append(Hypothesis(live[parent[j]].tokens + [EOS], float(flat[j]), True))
                continue
            new_live.append(Hypothesis(live[parent[j]].tokens + [int(tok[j])], float(flat[j])))
            if len(new_live) == beam_size:
                break
        live = new_live
        if not live:
            break
        if len(finished) >= beam_size:
            if not exact:
                break
            kth = sorted(h.score(length_alpha) for h in finished)[-beam_size]
            bound = max(h.logprob for h in live) / float(max_len) ** length_alpha
            if bound <= kth:
                break
    truncated = not finished
    pool = finished if finished else live
    ranked = sorted(pool, key=lambda h: (-h.score(length_alpha), h.tokens))
    return DecodeResult(ranked, truncated, [h.score(length_alpha) for h in ranked])


def greedy_decode(model: Seq2Seq, src_ext: Sequence[int], max_len: int = 64) -> list[int]:
    """Argmax decoding; stops at EOS or ``max_len``."""
    scorer = EnsembleScorer([model], src_ext)
    tokens = [BOS]
    for _ in range(max_len):
        w = int(np.argmax(scorer(np.array([tokens]))[0]))
        tokens.append(w)
        if w == EOS:
            break
    return tokens


def decode_text(models, source_tokens: Sequence[str], vocab: Vocabulary, beam_size: int = 4,
                max_len: int = 64, length_alpha: float = 1.0) -> tuple[list[str], DecodeResult]:
    """Decode surface tokens, mapping copied OOV ids back to their source words."""
    src, _ = encode_extended(list(source_tokens), [], vocab)
    if not src.ext_ids:
        return [], DecodeResult([Hypothesis([BOS], 0.0)], True, [0.0])
    res = beam_search(models, src.ext_ids, beam_size, max_len,
                      n_ext=len(vocab) + len(src.oov_words), length_alpha=length_alpha)
    return decode_ids(res.best.output_ids(), vocab, src.oov_words), res
