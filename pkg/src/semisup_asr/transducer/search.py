"""Greedy and beam-search transducer decoding with shallow LM fusion."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..textkit import FusionParams, TransformerLM, corpus_wer, lm_score
from .model import BLANK_ID, Decoder, TransducerModel


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    asr_logp: float
    lm_logp: float = 0.0
    lm_state: object = field(default=None, compare=False, repr=False)

    @property
    def n_nonblank(self) -> int:
        return len(self.tokens)


def fused_score(hyp: Hypothesis, params: FusionParams) -> float:
    return hyp.asr_logp + params.lam * hyp.lm_logp + params.beta * hyp.n_nonblank


class PrefixCache:
    """Prediction-network outputs and LM states keyed by token prefix."""

    def __init__(self, decoder: Decoder, lm: TransformerLM | None = None):
        self.decoder = decoder
        self.lm = lm
        pred = decoder.prediction
        out, state = pred.step(BLANK_ID, pred.initial_state())
        self._dec = {(): (decoder.joint.project_decoder(out), state)}
        self._lm = {}

    def dec(self, tokens: tuple[int, ...]) -> np.ndarray:
        hit = self._dec.get(tokens)
        if hit is None:
            self.dec(tokens[:-1])
            _, state = self._dec[tokens[:-1]]
            out, state = self.decoder.prediction.step(tokens[-1], state)
            hit = self._dec[tokens] = (self.decoder.joint.project_decoder(out), state)
        return hit[0]

    def lm_state(self, tokens: tuple[int, ...]):
        hit = self._lm.get(tokens)
        if hit is None:
            hit = self.lm.begin() if not tokens else self.lm.advance(self.lm_state(tokens[:-1]), tokens[-1])
            self._lm[tokens] = hit
        return hit


def greedy_decode(enc_out: np.ndarray, decoder: Decoder, max_symbols_per_frame: int = 4) -> Hypothesis:
    """Emit the arg-max symbol until blank; blank is forced after ``max_symbols_per_frame`` labels."""
    cache = PrefixCache(decoder)
    enc_p = decoder.joint.project_encoder(np.asarray(enc_out))
    tokens: tuple[int, ...] = ()
    score = 0.0
    for t in range(enc_p.shape[0]):
        for s in range(max_symbols_per_frame + 1):
            lp = decoder.joint.log_probs(enc_p[t], cache.dec(tokens))
            k = int(np.argmax(lp)) if s < max_symbols_per_frame else BLANK_ID
            score += float(lp[k])
            if k == BLANK_ID:
                break
            tokens = tokens + (k,)
    return Hypothesis(tokens, score)


def _merge(pool: dict, hyp: Hypothesis) -> None:
    old = pool.get(hyp.tokens)
    if old is None:
        pool[hyp.tokens] = hyp
    else:
        pool[hyp.tokens] = Hypothesis(hyp.tokens, float(np.logaddexp(old.asr_logp, hyp.asr_logp)),
                                      hyp.lm_logp, hyp.lm_state)


def beam_search(
    enc_out: np.ndarray,
    decoder: Decoder,
    lm: TransformerLM | None = None,
    params: FusionParams = FusionParams(),
    beam: int = 8,
    max_symbols_per_frame: int = 4,
    max_len: int | None = None,
    cache: PrefixCache | None = None,
) -> Hypothesis:
    """Time-synchronous transducer beam search ranked by fused score.

    Within a frame, hypotheses are extended in rounds. Each round pools the
    frame-finished hypotheses (blank emitted) with one-label extensions of the
    still-active ones, merges identical token prefixes by log-sum-exp of their
    ASR scores, and keeps the best ``beam`` entries. Ties go to the
    lexicographically smaller token sequence, then the shorter one, then to
    finished over active entries.

    Args:
        enc_out: (T, D) encoder output of one utterance.
        max_symbols_per_frame: label emissions allowed per frame before blank is forced.
        max_len: optional cap on the number of emitted labels.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    use_lm = lm is not None and params.lam != 0.0
    cache = cache or PrefixCache(decoder, lm)
    if use_lm and cache.lm is None:
        cache.lm = lm
    joint = decoder.joint
    enc_p = joint.project_encoder(np.asarray(enc_out))
    v = joint.out.weight.shape[1]
    labels = np.arange(1, v)
    beam_hyps = [Hypothesis((), 0.0, 0.0, cache.lm_state(()) if use_lm else None)]

    def rank(kind_hyp):
        kind, h = kind_hyp
        return (-fused_score(h, params), h.tokens, kind)

    for t in range(enc_p.shape[0]):
        finished: dict = {}
        active = beam_hyps
        for r in range(max_symbols_per_frame + 1):
            if not active:
                break
            lp = joint.log_probs(enc_p[t], np.stack([cache.dec(h.tokens) for h in active]))
            expansions = []
            for h, row in zip(active, lp):
                _merge(finished, Hypothesis(h.tokens, h.asr_logp + float(row[BLANK_ID]), h.lm_logp, h.lm_state))
                if r == max_symbols_per_frame or (max_len is not None and len(h.tokens) >= max_len):
                    continue
                lm_lp = h.lm_state.logprobs if use_lm else None
                gain = row[1:] + (params.lam * lm_lp[1:] if use_lm else 0.0)
                top = labels if beam >= len(labels) else labels[np.argsort(-gain, kind="stable")[:beam]]
                for k in top:
                    toks = h.tokens + (int(k),)
                    expansions.append(Hypothesis(
                        toks, h.asr_logp + float(row[k]),
                        h.lm_logp + (float(lm_lp[k]) if use_lm else 0.0),
                        cache.lm_state(toks) if use_lm else None))
            pool = [(0, h) for h in finished.values()] + [(1, h) for h in expansions]
            kept = sorted(pool, key=rank)[:beam]
            finished = {h.tokens: h for kind, h in kept if kind == 0}
            active = [h for kind, h in kept if kind == 1]
        beam_hyps = sorted(finished.values(), key=lambda h: (-fused_score(h, params), h.tokens))[:beam]
    best = beam_hyps[0]
    if lm is not None and not use_lm:
        best = Hypothesis(best.tokens, best.asr_logp, lm_score(lm, best.tokens))
    return best


def decode_utterance(model: TransducerModel, feats: np.ndarray, lm: TransformerLM | None = None,
                     params: FusionParams = FusionParams(), beam: int = 8,
                     max_symbols_per_frame: int = 4) -> Hypothesis:
    """Encode one un-augmented utterance (T, n_mels) in eval mode and beam-search it."""
    was_training = model.training
    model.eval()
    try:
        enc = model.encode_numpy(feats)
    finally:
        model.train(was_training)
    if beam == 1 and (lm is None or params.lam == 0.0) and params.beta == 0.0:
        return greedy_decode(enc, model.decoder, max_symbols_per_frame)
    return beam_search(enc, model.decoder, lm, params, beam, max_symbols_per_frame)


@dataclass
class FusionTuning:
    best: FusionParams
    log: list[dict]


def tune_fusion(
    model: TransducerModel,
    lm: TransformerLM | None,
    dev_set: Sequence[tuple[np.ndarray, str]],
    grid: Iterable[tuple[float, float]],
    beam: int = 8,
    to_text: Callable[[Sequence[int]], str] | None = None,
    max_symbols_per_frame: int = 4,
) -> FusionTuning:
    """Grid-search (lambda, beta) for the lowest dev WER.

    ``dev_set`` holds (features, reference text) pairs; ``to_text`` maps token
    ids to text (token ids joined by spaces when omitted). Ties go to the
    lexicographically smaller (lambda, beta).
    """
    grid = sorted({(float(a), float(b)) for a, b in grid})
    if not grid or not dev_set:
        raise ValueError("tune_fusion needs a non-empty grid and dev set")
    to_text = to_text or (lambda toks: " ".join(str(t) for t in toks))
    was_training = model.training
    model.eval()
    try:
        encs = [model.encode_numpy(f) for f, _ in dev_set]
    finally:
        model.train(was_training)
    cache = PrefixCache(model.decoder, lm)
    log = []
    for lam, b in grid:
        p = FusionParams(lam, b)
        hyps = [beam_search(e, model.decoder, lm, p, beam, max_symbols_per_frame, cache=cache) for e in encs]
        w = corpus_wer((ref, to_text(h.tokens)) for (_, ref), h in zip(dev_set, hyps))
        log.append({"lambda": lam, "beta": b, "wer": w})
    best = min(log, key=lambda r: (r["wer"], r["lambda"], r["beta"]))
    return FusionTuning(FusionParams(best["lambda"], best["beta"]), log)


DECODE_FIELDS = ("id", "transcript", "tokens", "asr_logp", "lm_logp", "n_nonblank", "fused_score")


def decode_record(utt_id: str, hyp: Hypothesis, params: FusionParams, transcript: str) -> dict:
    return {"id": utt_id, "transcript": transcript, "tokens": list(hyp.tokens),
            "asr_logp": hyp.asr_logp, "lm_logp": hyp.lm_logp, "n_nonblank": hyp.n_nonblank,
            "fused_score": fused_score(hyp, params)}


def write_decode_manifest(path: str | os.PathLike, records: Iterable[dict]) -> None:
    lines = [json.dumps({k: r[k] for k in DECODE_FIELDS}, sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_decode_manifest(path: str | os.PathLike) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = set(DECODE_FIELDS) - set(rec)
        if missing:
            raise ValueError(f"{path}:{n}: missing fields {sorted(missing)}")
        out.append(rec)
    return out
