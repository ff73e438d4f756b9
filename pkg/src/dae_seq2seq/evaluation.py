"""Perplexity and ROUGE-1/2/L."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .training import Example, evaluate_loss


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, n_candidate: float, n_reference: float) -> "RougeScore":
        p = overlap / n_candidate if n_candidate else 0.0
        r = overlap / n_reference if n_reference else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)

    def scaled(self) -> tuple[float, float, float]:
        """Percentages rounded to two decimals, as reported."""
        return tuple(round(100 * v, 2) for v in (self.precision, self.recall, self.f1))


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> RougeScore:
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((c & r).values())
    return RougeScore.from_counts(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


def best_over_references(metric, candidate, references) -> RougeScore:
    """Score against several references and keep the highest F1."""
    return max((metric(candidate, ref) for ref in references), key=lambda s: s.f1)


def corpus_rouge(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> dict:
    """Mean ROUGE-1/2/L precision, recall and F1 over aligned pairs."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("nothing to score")
    metrics = {
        "rouge-1": lambda c, r: rouge_n(c, r, 1),
        "rouge-2": lambda c, r: rouge_n(c, r, 2),
        "rouge-l": rouge_l,
    }
    out = {}
    for name, fn in metrics.items():
        scores = [fn(c, r) for c, r in zip(candidates, references)]
        k = len(scores)
        out[name] = RougeScore(sum(s.precision for s in scores) / k,
                               sum(s.recall for s in scores) / k,
                               sum(s.f1 for s in scores) / k)
    return out


def perplexity(model, examples: Sequence[Example], token_budget: int = 3000, params=None) -> float:
    """exp of the mean NLL over masked positions (all positions for paired data)."""
    if not examples:
        raise ValueError("perplexity of an empty dataset")
    return math.exp(evaluate_loss(model, examples, token_budget, params))


def format_report(scores: dict, ppl: float | None = None) -> str:
    lines = ["metric\tprecision\trecall\tf1"]
    for name, s in scores.items():
        p, r, f = s.scaled()
        lines.append(f"{name}\t{p:.2f}\t{r:.2f}\t{f:.2f}")
    if ppl is not None:
        lines.append(f"perplexity\t\t\t{ppl:.4f}")
    return "\n".join(lines) + "\n"
