"""Synthetic speech-like corpus standing in for labeled, unlabeled and dev audio.

Each letter of a small alphabet owns a prototype log-mel frame; a word is the
run of its letters' prototypes (random per-letter durations) and words are
separated by short low-energy gaps. Every utterance belongs to a speaker whose
prototypes are perturbed, and cells receive Gaussian noise. Transcripts come
from a sparse word-level Markov chain, so an LM trained on extra text is
informative.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import FeatureSequence, read_features, write_features
from .numcore import make_rng


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_words: int = 16
    alphabet: str = "abcdefgh"
    word_len: tuple[int, int] = (2, 4)
    n_mels: int = 16
    frames_per_letter: tuple[int, int] = (3, 5)
    gap_frames: tuple[int, int] = (2, 3)
    words_per_utt: tuple[int, int] = (2, 4)
    successors: int = 3
    prototype_scale: float = 1.0
    speaker_scale: float = 0.35
    n_speakers: int = 40
    noise: float = 0.6
    n_supervised: int = 50
    n_unlabeled: int = 500
    n_dev: int = 100
    n_lm_text: int = 3000

    def __post_init__(self):
        if min(self.n_supervised, self.n_unlabeled, self.n_dev) < 0 or self.n_words < 1:
            raise ValueError("dataset sizes must be nonnegative and n_words >= 1")
        if len(set(self.alphabet)) != len(self.alphabet) or len(self.alphabet) < 2:
            raise ValueError("alphabet needs at least two distinct letters")


@dataclass
class Utterance:
    id: str
    features: FeatureSequence
    text: str | None = None
    speaker: int = 0


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    lexicon: list[str]
    prototypes: np.ndarray  # (len(alphabet) + 1, n_mels); last row is the gap
    transitions: np.ndarray
    supervised: list[Utterance] = field(default_factory=list)
    unlabeled: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    lm_text: list[str] = field(default_factory=list)


def _lexicon(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set()
    letters = list(spec.alphabet)
    while len(words) < spec.n_words:
        n = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
        w = [letters[int(rng.integers(len(letters)))]]
        while len(w) < n:
            c = letters[int(rng.integers(len(letters)))]
            if c != w[-1]:
                w.append(c)
        s = "".join(w)
        if s not in seen:
            seen.add(s)
            words.append(s)
    return words


def _transitions(spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    p = np.zeros((spec.n_words, spec.n_words))
    k = min(spec.successors, spec.n_words)
    for i in range(spec.n_words):
        nxt = rng.choice(spec.n_words, size=k, replace=False)
        p[i, nxt] = rng.dirichlet(np.full(k, 2.0))
    return p


def sample_sentence(task: SyntheticTask, rng: np.random.Generator) -> str:
    spec = task.spec
    n = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
    w = int(rng.integers(spec.n_words))
    out = [w]
    for _ in range(n - 1):
        w = int(rng.choice(spec.n_words, p=task.transitions[w]))
        out.append(w)
    return " ".join(task.lexicon[i] for i in out)


def _speaker_prototypes(task: SyntheticTask, speaker: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, "speaker", speaker)
    return task.prototypes + task.spec.speaker_scale * rng.standard_normal(task.prototypes.shape)


def render(task: SyntheticTask, text: str, speaker: int, rng: np.random.Generator, seed: int,
           noise: float | None = None) -> FeatureSequence:
    """Features for ``text`` spoken by ``speaker``; leading and trailing gaps included."""
    spec = task.spec
    protos = _speaker_prototypes(task, speaker, seed)
    gap = len(spec.alphabet)
    index = {c: i for i, c in enumerate(spec.alphabet)}
    rows: list[int] = []

    def add(unit, lo_hi):
        rows.extend([unit] * int(rng.integers(lo_hi[0], lo_hi[1] + 1)))

    add(gap, spec.gap_frames)
    for word in text.split():
        for c in word:
            add(index[c], spec.frames_per_letter)
        add(gap, spec.gap_frames)
    frames = protos[rows]
    sigma = spec.noise if noise is None else noise
    if sigma:
        frames = frames + sigma * rng.standard_normal(frames.shape)
    return FeatureSequence(frames, len(rows))


def synth_generate(spec: SyntheticTaskSpec, seed: int) -> SyntheticTask:
    """Deterministic supervised / unlabeled / dev splits plus LM text.

    Speakers are split so that dev speakers never occur in training data.
    Unlabeled utterances carry no transcript.
    """
    rng = make_rng(seed, "synth", "structure")
    lexicon = _lexicon(spec, rng)
    protos = spec.prototype_scale * rng.standard_normal((len(spec.alphabet) + 1, spec.n_mels))
    protos[-1] = -2.0 * spec.prototype_scale  # low-energy gap
    task = SyntheticTask(spec, lexicon, protos, _transitions(spec, rng))
    n_dev_spk = max(1, spec.n_speakers // 4)
    train_spk = np.arange(n_dev_spk, max(spec.n_speakers, n_dev_spk + 1))
    dev_spk = np.arange(n_dev_spk)

    def make(split: str, n: int, speakers: np.ndarray, labeled: bool) -> list[Utterance]:
        r = make_rng(seed, "synth", split)
        out = []
        for i in range(n):
            text = sample_sentence(task, r)
            spk = int(speakers[int(r.integers(len(speakers)))])
            fs = render(task, text, spk, r, seed)
            fs.source_id = f"{split}-{i:05d}"
            out.append(Utterance(fs.source_id, fs, text if labeled else None, spk))
        return out

    task.supervised = make("supervised", spec.n_supervised, train_spk, True)
    task.unlabeled = make("unlabeled", spec.n_unlabeled, train_spk, False)
    task.dev = make("dev", spec.n_dev, dev_spk, True)
    r = make_rng(seed, "synth", "lm_text")
    task.lm_text = [sample_sentence(task, r) for _ in range(spec.n_lm_text)]
    return task


def nearest_signature_decode(task: SyntheticTask, features: FeatureSequence) -> str:
    """Label each frame by its nearest clean prototype, collapse runs, split words at gaps."""
    x = features.frames[:features.valid_length]
    d = ((x[:, None, :] - task.prototypes[None]) ** 2).sum(-1)
    units = d.argmin(1)
    gap = len(task.spec.alphabet)
    words, cur, prev = [], [], None
    for u in units:
        if u == prev:
            continue
        prev = u
        if u == gap:
            if cur:
                words.append("".join(cur))
                cur = []
        else:
            cur.append(task.spec.alphabet[u])
    if cur:
        words.append("".join(cur))
    return " ".join(words)


# -- manifests -----------------------------------------------------------------

def write_manifest(path: str | os.PathLike, utterances: Sequence[Utterance], feature_dir: str | os.PathLike,
                   extra: dict | None = None) -> None:
    """JSONL manifest; one feature file per utterance. ``text`` only for labeled entries."""
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        fpath = feature_dir / f"{u.id}.feat"
        write_features(fpath, u.features)
        rec = {"id": u.id, "features": str(fpath), "frames": u.features.valid_length, "speaker": u.speaker}
        if u.text is not None:
            rec["text"] = u.text
        rec.update((extra or {}).get(u.id, {}))
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path: str | os.PathLike) -> list[Utterance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        fs = read_features(rec["features"])
        out.append(Utterance(rec["id"], fs, rec.get("text"), rec.get("speaker", 0)))
    return out


def spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    return asdict(spec)
