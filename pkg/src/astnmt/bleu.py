"""Corpus BLEU-4 with multi-bleu counting (single reference)."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    precisions: tuple[float, ...]
    brevity_penalty: float
    score: float  # in [0, 1]
    hyp_len: int
    ref_len: int
    matches: tuple[int, ...]
    totals: tuple[int, ...]

    @property
    def percent(self) -> float:
        return 100.0 * self.score

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.percent:.2f}, {ps} "
            f"(BP={self.brevity_penalty:.3f}, ratio={self.hyp_len / max(self.ref_len, 1):.3f}, "
            f"hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypotheses: Sequence[Sequence], references: Sequence[Sequence], smooth: bool = False
) -> BleuReport:
    """Clipped n-gram precision for n = 1..4 pooled over the corpus, times the brevity penalty.

    With ``smooth`` on, orders 2-4 use add-one counts (m + 1) / (t + 1), which
    keeps short toy corpora from scoring zero on a missing 4-gram.
    """
    if len(hypotheses) == 0:
        raise ValueError("bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"{len(hypotheses)} hypotheses but {len(references)} references"
        )
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())

    precisions = []
    for n in range(MAX_ORDER):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        precisions.append(m / t if t else 0.0)

    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(
        tuple(precisions), bp, score, hyp_len, ref_len, tuple(matches), tuple(totals)
    )
