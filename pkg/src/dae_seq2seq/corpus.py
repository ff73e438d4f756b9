"""Corpus reading, filtering, segmentation, vocabulary and id encoding."""
from __future__ import annotations

import gzip
import hashlib
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
N_SPECIALS = len(SPECIALS)


def tokenize(text: str) -> list[str]:
    return text.split()


class Vocabulary:
    """Frequency-ranked, case-sensitive word table.

    Indices 0-3 hold the special tokens; ranked words start at index 4.
    """

    def __init__(self, words: Iterable[str] = (), counts: Iterable[int] = ()):
        self.words = list(words)
        self.counts = list(counts)
        if len(self.words) != len(self.counts):
            raise ValueError("words and counts differ in length")
        self._index = {w: i + N_SPECIALS for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise ValueError("duplicate word in vocabulary")
        if any(w in SPECIALS for w in self.words):
            raise ValueError("special token in ranked word list")

    def __len__(self) -> int:
        return N_SPECIALS + len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.words == other.words
            and self.counts == other.counts
        )

    def lookup(self, word: str) -> int:
        if word in SPECIALS:
            return SPECIALS.index(word)
        return self._index.get(word, UNK)

    def word_at(self, index: int) -> str:
        if index < N_SPECIALS:
            return SPECIALS[index]
        return self.words[index - N_SPECIALS]

    def unigram(self):
        """Normalized frequency over the full table; specials get zero mass."""
        probs = np.zeros(len(self), dtype=np.float64)
        if self.words:
            c = np.asarray(self.counts, dtype=np.float64)
            probs[N_SPECIALS:] = c / c.sum()
        return probs

    def to_tsv(self) -> str:
        return "".join(f"{w}\t{c}\n" for w, c in zip(self.words, self.counts))

    @classmethod
    def from_tsv(cls, text: str) -> "Vocabulary":
        words, counts = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            try:
                w, c = line.split("\t")
                counts.append(int(c))
            except ValueError:
                raise ValueError(f"vocabulary line {lineno}: expected 'word<TAB>count'") from None
            words.append(w)
        return cls(words, counts)

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()


def count_tokens(token_stream: Iterable[str]) -> Counter:
    # Counter preserves insertion order, which records first occurrence
    return Counter(token_stream)


def merge_counts(shards: Iterable[Counter]) -> Counter:
    """Merge per-shard counts; earlier shards win first-occurrence ties."""
    total: Counter = Counter()
    for c in shards:
        total.update(c)
    return total


def vocab_from_counts(counts: Counter, max_size: int) -> Vocabulary:
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    first = {w: i for i, w in enumerate(counts)}
    ranked = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], first[w]))
    ranked = ranked[:max_size]
    return Vocabulary(ranked, [counts[w] for w in ranked])


def build_vocab(token_stream: Iterable[str], max_size: int) -> Vocabulary:
    return vocab_from_counts(count_tokens(token_stream), max_size)


def oov_count(tokens: list[str], vocab: Vocabulary) -> int:
    return sum(1 for t in tokens if t not in vocab)


def filter_paragraph(tokens: list[str], vocab: Vocabulary, min_len: int = 3,
                     max_oov_ratio: float = 0.30) -> bool:
    """True to keep the paragraph."""
    if len(tokens) < min_len:
        return False
    return oov_count(tokens, vocab) / len(tokens) <= max_oov_ratio


def segment_paragraph(tokens: list[str], max_len: int = 128) -> list[list[str]]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return [tokens[i:i + max_len] for i in range(0, len(tokens), max_len)]


def filter_sentence(tokens: list[str], max_len: int = 500) -> bool:
    return len(tokens) <= max_len


def open_text(path) -> io.TextIOBase:
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def read_lines(paths) -> Iterator[str]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    for p in paths:
        with open_text(p) as f:
            for line in f:
                yield line.rstrip("\n")


def preprocess(lines: Iterable[str], vocab: Vocabulary, mode: str = "sentence",
               segment_len: int = 128, sentence_max: int = 500) -> list[list[str]]:
    """Apply the paragraph or sentence filter chain to tokenized lines.

    ``mode="paragraph"`` filters short / OOV-heavy paragraphs, then splits
    survivors into segments; ``mode="sentence"`` drops over-long sentences.
    Empty lines are always dropped.
    """
    out = []
    for line in lines:
        tokens = tokenize(line)
        if not tokens:
            continue
        if mode == "paragraph":
            if filter_paragraph(tokens, vocab):
                out.extend(segment_paragraph(tokens, segment_len))
        elif mode == "sentence":
            if filter_sentence(tokens, sentence_max):
                out.append(tokens)
        else:
            raise ValueError(f"unknown corpus mode {mode!r}")
    return out


@dataclass
class TokenSequence:
    words: list[str]
    ids: list[int]
    ext_ids: list[int]
    oov_words: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.words)


def encode(tokens: list[str], vocab: Vocabulary) -> TokenSequence:
    ids = [vocab.lookup(t) for t in tokens]
    return TokenSequence(list(tokens), ids, list(ids), [])


def encode_extended(source_tokens: list[str], target_tokens: list[str],
                    vocab: Vocabulary) -> tuple[TokenSequence, TokenSequence]:
    """Encode a pair, numbering source OOVs ``V, V+1, ...`` by first appearance."""
    V = len(vocab)
    oov: dict[str, int] = {}
    src_ids, src_ext = [], []
    for t in source_tokens:
        i = vocab.lookup(t)
        src_ids.append(i)
        if i == UNK and t not in SPECIALS:
            i = oov.setdefault(t, V + len(oov))
        src_ext.append(i)
    oov_words = list(oov)
    tgt_ids, tgt_ext = [], []
    for t in target_tokens:
        i = vocab.lookup(t)
        tgt_ids.append(i)
        tgt_ext.append(oov.get(t, i) if i == UNK else i)
    return (TokenSequence(list(source_tokens), src_ids, src_ext, oov_words),
            TokenSequence(list(target_tokens), tgt_ids, tgt_ext, oov_words))


def decode_ids(ext_ids: Iterable[int], vocab: Vocabulary, oov_words: list[str] = ()) -> list[str]:
    V = len(vocab)
    out = []
    for i in ext_ids:
        out.append(oov_words[i - V] if i >= V else vocab.word_at(i))
    return out
