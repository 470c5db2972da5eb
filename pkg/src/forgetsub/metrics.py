"""Word-level scoring: normalization, Levenshtein distance, pooled WER and
relative change scores.

WER is pooled at corpus level (total edits over total reference words), which
makes it additive across samples. That additivity is what lets the
evaluation cache score an arbitrary subset with a sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

from .errors import EmptyReference

Transcript = Tuple[str, ...]

# Fallback guard for callers that do not know the subset size.
DEFAULT_EPS_DIV = 1e-9


def normalize(raw_text: str) -> Transcript:
    """Lowercase and split on runs of whitespace. No punctuation stripping."""
    return tuple(raw_text.lower().split())


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Minimum number of word substitutions, insertions and deletions
    turning ``ref`` into ``hyp``."""
    # common prefix/suffix never changes the optimum
    start = 0
    n, m = len(ref), len(hyp)
    while start < n and start < m and ref[start] == hyp[start]:
        start += 1
    while n > start and m > start and ref[n - 1] == hyp[m - 1]:
        n -= 1
        m -= 1
    a = ref[start:n]
    b = hyp[start:m]
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class WerStat:
    edits: int
    ref_words: int

    def __post_init__(self):
        if self.edits < 0 or self.ref_words < 0:
            raise ValueError(f"negative WerStat {self}")

    def __add__(self, other: "WerStat") -> "WerStat":
        return WerStat(self.edits + other.edits, self.ref_words + other.ref_words)

    @classmethod
    def of(cls, ref: Sequence[str], hyp: Sequence[str]) -> "WerStat":
        return cls(edit_distance(ref, hyp), len(ref))


def pool(stats: Iterable[WerStat]) -> WerStat:
    edits = words = 0
    for s in stats:
        edits += s.edits
        words += s.ref_words
    return WerStat(edits, words)


def wer(stats: Iterable[WerStat]) -> float:
    """Corpus WER: sum of edits divided by sum of reference words.

    Raises:
        EmptyReference: if the pooled reference is empty.
    """
    total = pool(stats)
    if total.ref_words == 0:
        raise EmptyReference("WER undefined for zero reference words")
    return total.edits / total.ref_words


def forgetting_score(wer_after: float, wer_before: float,
                     eps_div: float = DEFAULT_EPS_DIV) -> float:
    """Relative WER increase (-WERR). Positive means the model forgot."""
    return (wer_after - wer_before) / max(wer_before, eps_div)


def improvement_score(wer_after: float, wer_before: float,
                      eps_div: float = DEFAULT_EPS_DIV) -> float:
    """Relative WER reduction (WERR). Positive means the model improved."""
    return (wer_before - wer_after) / max(wer_before, eps_div)
