"""Word error rate by Levenshtein alignment."""

from __future__ import annotations

from typing import Iterable, Sequence


def _words(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Minimum substitutions + insertions + deletions turning ``a`` into ``b``."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(reference, hypothesis) -> float:
    ref = _words(reference)
    if not ref:
        raise ValueError("reference must contain at least one word")
    return edit_distance(ref, _words(hypothesis)) / len(ref)


def corpus_wer(pairs: Iterable[tuple]) -> float:
    """Total edits over total reference words."""
    edits = words = 0
    for ref, hyp in pairs:
        r = _words(ref)
        edits += edit_distance(r, _words(hyp))
        words += len(r)
    if words == 0:
        raise ValueError("references contain no words")
    return edits / words
