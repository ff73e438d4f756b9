"""Synthetic corpora for desk-scale experiments.

``sentences`` draws from a small template grammar with a long tail of rare
names, so a frequency-capped vocabulary leaves some tokens out of vocabulary.
``headline_pairs`` derives a summarization-style task from the same grammar
(sentence -> subject verb object); ``identity_pairs`` is a pure copy task.
"""
from __future__ import annotations

import numpy as np

DETERMINERS = ["the", "a", "every", "some", "that"]
ADJECTIVES = ["big", "small", "red", "old", "young", "quiet", "loud", "happy", "sad", "fast",
              "slow", "bright", "dark", "tall", "short", "clever", "lazy", "brave", "calm", "wild"]
NOUNS = ["fox", "dog", "cat", "bird", "farmer", "teacher", "child", "river", "king", "queen",
         "horse", "sailor", "doctor", "baker", "wolf", "painter", "soldier", "student", "owl", "bear",
         "miller", "tailor", "hunter", "poet", "merchant", "judge", "pilot", "singer", "monk", "thief"]
VERBS = ["sees", "likes", "follows", "helps", "finds", "visits", "watches", "meets", "calls",
         "feeds", "chases", "greets", "paints", "trusts", "avoids", "carries", "hears", "teaches",
         "pushes", "thanks"]
ADVERBS = ["quickly", "slowly", "today", "again", "quietly", "often", "rarely", "gladly",
           "never", "happily"]
PLACES = ["near the river", "in the town", "at night", "by the sea", "under the bridge",
          "in the forest", "on the hill", "after dinner"]


def name_pool(n: int = 400) -> list[str]:
    syll = ["ka", "lo", "mi", "ra", "tu", "ve", "zo", "ni", "pe", "sa", "do", "ri"]
    out, rng = [], np.random.default_rng(12345)
    while len(out) < n:
        k = rng.integers(2, 4)
        w = "".join(syll[i] for i in rng.integers(0, len(syll), k)).capitalize()
        if w not in out:
            out.append(w)
    return out


NAMES = name_pool()


def _noun_phrase(rng, name_rate):
    if rng.random() < name_rate:
        name = NAMES[int(rng.integers(0, len(NAMES)))]
        return [name], name
    words = [DETERMINERS[int(rng.integers(0, len(DETERMINERS)))]]
    if rng.random() < 0.6:
        words.append(ADJECTIVES[int(rng.integers(0, len(ADJECTIVES)))])
    noun = NOUNS[int(rng.integers(0, len(NOUNS)))]
    return words + [noun], noun


def sentence(rng: np.random.Generator, name_rate: float = 0.15) -> tuple[list[str], list[str]]:
    """One sentence plus its subject-verb-object headline."""
    subj, s_head = _noun_phrase(rng, name_rate)
    verb = VERBS[int(rng.integers(0, len(VERBS)))]
    obj, o_head = _noun_phrase(rng, name_rate)
    words = subj + [verb] + obj
    if rng.random() < 0.5:
        words.append(ADVERBS[int(rng.integers(0, len(ADVERBS)))])
    if rng.random() < 0.4:
        words.extend(PLACES[int(rng.integers(0, len(PLACES)))].split())
    words.append(".")
    return words, [s_head, verb, o_head]


def sentences(n: int, seed: int = 0, name_rate: float = 0.15) -> list[list[str]]:
    rng = np.random.default_rng(seed)
    return [sentence(rng, name_rate)[0] for _ in range(n)]


def headline_pairs(n: int, seed: int = 0, name_rate: float = 0.15):
    rng = np.random.default_rng(seed)
    return [sentence(rng, name_rate) for _ in range(n)]


def identity_pairs(n: int, seed: int = 0, oov_rate: float = 0.2, n_words: int = 60,
                   min_len: int = 4, max_len: int = 8):
    """Copy task over ``w0..w{n_words-1}`` where ``oov_rate`` of tokens are unique OOVs."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        toks = []
        for _ in range(L):
            if rng.random() < oov_rate:
                toks.append(f"X{int(rng.integers(0, 10 ** 9))}")
            else:
                toks.append(f"w{int(rng.integers(0, n_words))}")
        pairs.append((toks, list(toks)))
    return pairs


def in_vocab_words(n_words: int = 60) -> list[str]:
    return [f"w{i}" for i in range(n_words)]
