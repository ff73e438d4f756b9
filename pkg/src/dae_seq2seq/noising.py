"""Stochastic shuffle / delete / replace corruption and loss-mask construction.

All operators return, next to the transformed tokens, a boolean flag per
*input* position.  ``apply_noise`` composes them while carrying each
surviving token's clean index, so the final corruption flags always index
the clean sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import N_SPECIALS, Vocabulary


class NoiseConfigError(ValueError):
    pass


def derive_beta_params(mean: float, std: float) -> tuple[float, float]:
    """Moment-matched Beta(alpha, beta) with the given mean and std."""
    if not 0.0 < mean < 1.0:
        raise NoiseConfigError(f"Beta mean must lie in (0, 1), got {mean}")
    var = std * std
    if not 0.0 < var < mean * (1.0 - mean):
        raise NoiseConfigError(
            f"Beta std {std} violates the variance bound std^2 < mean(1-mean) = {mean * (1 - mean):.6g}"
        )
    s = mean * (1.0 - mean) / var - 1.0
    return mean * s, (1.0 - mean) * s


@dataclass
class NoiseConfig:
    # variance of the Gaussian position jitter; std is sqrt(sigma)
    sigma: float = 0.5
    beta_mean: float = 0.15
    beta_std: float = 0.03
    keep_uncorrupted_rate: float = 0.03
    seed: int = 0
    alpha: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise NoiseConfigError("sigma must be >= 0")
        if not 0.0 <= self.keep_uncorrupted_rate <= 1.0:
            raise NoiseConfigError("keep_uncorrupted_rate must be in [0, 1]")
        self.alpha, self.beta = derive_beta_params(self.beta_mean, self.beta_std)


class Unigram:
    """Sampling distribution over replacement tokens."""

    def __init__(self, tokens: Sequence, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if len(tokens) != len(probs) or len(tokens) == 0:
            raise ValueError("unigram needs one probability per token")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("unigram probabilities must sum to 1")
        self.tokens = list(tokens)
        self.cdf = np.cumsum(probs)
        self.cdf[-1] = 1.0

    @classmethod
    def from_vocab(cls, vocab: Vocabulary) -> "Unigram":
        return cls(vocab.words, vocab.unigram()[N_SPECIALS:])

    def sample(self, rng: np.random.Generator, n: int) -> list:
        idx = np.searchsorted(self.cdf, rng.random(n), side="right")
        return [self.tokens[i] for i in idx]


def shuffle(x: Sequence, sigma: float, rng: np.random.Generator,
            offsets=None) -> tuple[list, np.ndarray]:
    """Jitter each position by Gaussian noise and reorder by a stable argsort.

    ``sigma`` is the variance of the jitter.  ``offsets`` overrides the
    random draw (used to force specific permutations).
    """
    n = len(x)
    if offsets is None:
        offsets = rng.normal(0.0, math.sqrt(sigma), size=n) if sigma > 0 else np.zeros(n)
    keys = np.arange(n) + np.asarray(offsets, dtype=np.float64)
    order = np.argsort(keys, kind="stable")
    moved = np.zeros(n, dtype=bool)
    moved[order] = order != np.arange(n)
    return [x[i] for i in order], moved


def _draw_p(alpha, beta, rng, p):
    return rng.beta(alpha, beta) if p is None else p


def delete(x: Sequence, alpha: float, beta: float, rng: np.random.Generator,
           p: float | None = None) -> tuple[list, np.ndarray]:
    p = _draw_p(alpha, beta, rng, p)
    deleted = rng.random(len(x)) < p
    return [w for w, d in zip(x, deleted) if not d], deleted


def replace(x: Sequence, alpha: float, beta: float, unigram: Unigram,
            rng: np.random.Generator, p: float | None = None) -> tuple[list, np.ndarray]:
    p = _draw_p(alpha, beta, rng, p)
    replaced = rng.random(len(x)) < p
    out = list(x)
    picks = unigram.sample(rng, int(replaced.sum()))
    for i, w in zip(np.flatnonzero(replaced), picks):
        out[i] = w
    return out, replaced


@dataclass
class NoisedExample:
    clean: list
    noisy: list
    corrupted: np.ndarray
    mask: np.ndarray
    order: tuple[str, ...] = ()


def build_mask(corrupted, keep_rate: float, rng: np.random.Generator) -> np.ndarray:
    corrupted = np.asarray(corrupted, dtype=bool)
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError("keep_rate must be in [0, 1]")
    return corrupted | (rng.random(corrupted.shape) < keep_rate)


def apply_noise(x: Sequence, cfg: NoiseConfig, unigram: Unigram,
                rng: np.random.Generator, p: float | None = None) -> NoisedExample:
    """Corrupt ``x`` with the three operators in a uniformly random order.

    ``p`` forces the delete/replace probability instead of drawing it from
    the Beta prior.
    """
    if len(x) == 0:
        raise ValueError("apply_noise needs a non-empty sequence")
    tokens = list(x)
    origin = list(range(len(x)))
    corrupted = np.zeros(len(x), dtype=bool)
    names = ("shuffle", "delete", "replace")
    order = tuple(names[i] for i in rng.permutation(3))
    for name in order:
        if name == "shuffle":
            perm_tokens, moved = shuffle(list(zip(tokens, origin)), cfg.sigma, rng)
            tokens = [t for t, _ in perm_tokens]
            new_origin = [o for _, o in perm_tokens]
            corrupted[np.asarray(origin, dtype=np.int64)[moved]] = True
            origin = new_origin
        elif name == "delete":
            tokens, deleted = delete(tokens, cfg.alpha, cfg.beta, rng, p)
            corrupted[np.asarray(origin, dtype=np.int64)[deleted]] = True
            origin = [o for o, d in zip(origin, deleted) if not d]
        else:
            tokens, replaced = replace(tokens, cfg.alpha, cfg.beta, unigram, rng, p)
            corrupted[np.asarray(origin, dtype=np.int64)[replaced]] = True
    mask = build_mask(corrupted, cfg.keep_uncorrupted_rate, rng)
    return NoisedExample(list(x), tokens, corrupted, mask, order)


def preview_line(ex: NoisedExample) -> str:
    bits = "".join("1" if m else "0" for m in ex.mask)
    return f"{' '.join(map(str, ex.clean))}\t{' '.join(map(str, ex.noisy))}\t{bits}"
