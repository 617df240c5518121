"""Counter-based random streams derived from an explicit seed and a name path.

No module touches a global generator; every consumer asks for its own stream:

    rng = make_rng(seed, "spec_augment", utt_id)
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(token) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) & 0xFFFFFFFF
    digest = hashlib.sha256(str(token).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream path."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF] + [_word(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(seed: int, *stream) -> int:
    """A 63-bit integer seed for a named sub-stream."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
