"""Word-piece vocabulary learned with greedy pair merges, encoded by longest match."""

from __future__ import annotations

import collections
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

BLANK = "<blank>"
UNK = "<unk>"
SENT = "<s>"
WORD_BOUNDARY = "▁"
SPECIALS = (BLANK, UNK, SENT)


class TokenizerError(ValueError):
    pass


@dataclass
class TokenizerModel:
    """Ordered pieces; ids 0/1/2 are blank, unknown and sentence boundary."""

    pieces: list[str]
    scores: list[float]

    def __post_init__(self):
        self._index = {p: i for i, p in enumerate(self.pieces)}
        self._max_len = max(len(p) for p in self.pieces)

    blank_id = 0
    unk_id = 1
    sent_id = 2

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def word_boundary_id(self) -> int:
        return self._index.get(WORD_BOUNDARY, self.unk_id)

    def piece_to_id(self, piece: str) -> int:
        return self._index.get(piece, self.unk_id)

    def _encode_word(self, word: str) -> list[int]:
        ids = []
        i = 0
        while i < len(word):
            for j in range(min(len(word), i + self._max_len), i, -1):
                k = self._index.get(word[i:j])
                if k is not None and k >= len(SPECIALS):
                    ids.append(k)
                    i = j
                    break
            else:
                ids.append(self.unk_id)
                i += 1
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for w in text.split():
            out.extend(self._encode_word(WORD_BOUNDARY + w))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i == self.blank_id or i == self.sent_id:
                continue
            parts.append("?" if i == self.unk_id else self.pieces[i])
        return "".join(parts).replace(WORD_BOUNDARY, " ").strip()

    def save(self, path: str | os.PathLike) -> None:
        """One ``piece<TAB>score`` line per entry, in id order."""
        lines = [f"{p}\t{s:.6g}" for p, s in zip(self.pieces, self.scores)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TokenizerModel":
        pieces, scores = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            p, s = line.rsplit("\t", 1)
            pieces.append(p)
            scores.append(float(s))
        if tuple(pieces[:3]) != SPECIALS:
            raise TokenizerError(f"{path}: special pieces missing")
        return cls(pieces, scores)


def train_wpm(corpus: Sequence[str], vocab_budget: int) -> TokenizerModel:
    """Learn pieces by repeatedly merging the most frequent adjacent pair.

    Ties break toward the lexicographically smallest pair so the result is a
    pure function of the corpus.
    """
    if not corpus:
        raise TokenizerError("empty corpus")
    words = collections.Counter(WORD_BOUNDARY + w for line in corpus for w in line.split())
    chars = sorted({c for w in words for c in w})
    if len(SPECIALS) + len(chars) > vocab_budget:
        raise TokenizerError(
            f"vocab_budget {vocab_budget} < {len(SPECIALS) + len(chars)} (specials + characters)")
    pieces = list(SPECIALS) + chars
    char_counts = collections.Counter()
    for w, n in words.items():
        for c in w:
            char_counts[c] += n
    scores = [0.0] * len(SPECIALS) + [float(char_counts[c]) for c in chars]
    seqs = {w: list(w) for w in words}
    known = set(pieces)
    while len(pieces) < vocab_budget:
        pairs: collections.Counter = collections.Counter()
        for w, sym in seqs.items():
            n = words[w]
            for a, b in zip(sym, sym[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = best[0] + best[1]
        for w, sym in seqs.items():
            i, out = 0, []
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == best[0] and sym[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            seqs[w] = out
        if merged not in known:
            known.add(merged)
            pieces.append(merged)
            scores.append(float(pairs[best]))
    return TokenizerModel(pieces, scores)
