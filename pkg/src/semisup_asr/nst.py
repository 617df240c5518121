"""Noisy-student training: pseudo-labeling, filtering, balancing, mixing and generations.

One generation tunes shallow-fusion weights for the teacher on dev data,
labels the unlabeled pool with the fused teacher on clean features,
optionally filters and re-weights those transcripts, then fine-tunes fresh
students from the pre-trained checkpoint on supervised and pseudo-labeled
batches. Every artifact lives in a content-addressed generation directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .encoder import checkpoint_transplant, variant_config, variant_projection
from .frontend import FeatureSequence
from .numcore import load_arrays, make_rng, split_groups
from .synth import Utterance
from .textkit import FusionParams, TokenizerModel, TransformerLM, corpus_wer, lm_score
from .transducer import (
    DecoderConfig,
    FinetuneConfig,
    TransducerModel,
    build_transducer,
    decode_utterance,
    fused_score,
    load_ema,
    load_transducer,
    save_transducer,
    train_transducer,
    tune_fusion,
)

log = logging.getLogger(__name__)

SUPERVISED = "supervised"
PSEUDO = "pseudo"


class NstError(RuntimeError):
    pass


class StageFailed(NstError):
    """A generation stage raised; ``manifest`` records where it stopped."""

    def __init__(self, msg: str, manifest: "GenerationManifest"):
        super().__init__(msg)
        self.manifest = manifest


# -- mixing --------------------------------------------------------------------

@dataclass(frozen=True)
class MixPolicy:
    mode: str = "batchwise"
    supervised_per_batch: int = 1
    pseudo_per_batch: int = 9

    def __post_init__(self):
        if self.mode not in ("batchwise", "pooled"):
            raise ValueError(f"unknown mix mode {self.mode!r}")
        if min(self.supervised_per_batch, self.pseudo_per_batch) < 0 or self.batch_size < 1:
            raise ValueError("mix counts must be >= 0 with a positive total")

    @property
    def batch_size(self) -> int:
        return self.supervised_per_batch + self.pseudo_per_batch

    @property
    def ratio(self) -> str:
        return f"{self.supervised_per_batch}:{self.pseudo_per_batch}"

    @classmethod
    def from_ratio(cls, ratio: str, mode: str = "batchwise") -> "MixPolicy":
        try:
            s, p = (int(x) for x in ratio.split(":"))
        except ValueError:
            raise ValueError(f"mix ratio must look like '1:9', got {ratio!r}") from None
        return cls(mode, s, p)


def _cycle(n: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless indices into a pool of ``n``; a fresh permutation per epoch."""
    while True:
        yield from rng.permutation(n).tolist()


def _weighted(weights: np.ndarray, rng: np.random.Generator) -> Iterator[int]:
    p = np.asarray(weights, dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError("sampling weights must be nonnegative with a positive sum")
    p = p / p.sum()
    while True:
        yield from rng.choice(len(p), size=1024, p=p).tolist()


def mix_batches(supervised: Sequence, pseudo: Sequence, policy: MixPolicy, seed: int,
                pseudo_weights: Sequence[float] | None = None) -> Iterator[list[tuple[str, object]]]:
    """Endless stream of batches of ``(source, item)`` pairs.

    ``batchwise`` draws exactly the policy's counts from each pool per batch,
    each pool reshuffled per epoch. ``pooled`` concatenates both pools and
    reshuffles the union per epoch, so only the long-run fraction is fixed.
    ``pseudo_weights`` (e.g. from :func:`balance`) switches pseudo-label draws
    to weighted sampling with replacement.
    """
    rng = make_rng(seed, "mix", policy.mode)
    if policy.mode == "batchwise":
        if policy.supervised_per_batch and not supervised:
            raise ValueError("supervised pool is empty but the policy asks for supervised items")
        if policy.pseudo_per_batch and not pseudo:
            raise ValueError("pseudo-label pool is empty but the policy asks for pseudo items")
        sup = _cycle(len(supervised), make_rng(seed, "mix", "supervised")) if supervised else None
        if pseudo_weights is not None:
            psd = _weighted(pseudo_weights, make_rng(seed, "mix", "pseudo"))
        else:
            psd = _cycle(len(pseudo), make_rng(seed, "mix", "pseudo")) if pseudo else None
        while True:
            batch = [(SUPERVISED, supervised[next(sup)]) for _ in range(policy.supervised_per_batch)]
            batch += [(PSEUDO, pseudo[next(psd)]) for _ in range(policy.pseudo_per_batch)]
            yield batch
    else:
        pool = [(SUPERVISED, x) for x in supervised] + [(PSEUDO, x) for x in pseudo]
        if not pool:
            raise ValueError("both pools are empty")
        if pseudo_weights is not None:
            idx = _weighted(np.concatenate([np.ones(len(supervised)), np.asarray(pseudo_weights, float)]), rng)
        else:
            idx = _cycle(len(pool), rng)
        while True:
            yield [pool[next(idx)] for _ in range(policy.batch_size)]


def strip_sources(batches: Iterator[list[tuple[str, object]]]) -> Iterator[list]:
    for batch in batches:
        yield [item for _, item in batch]


# -- LM filtering ----------------------------------------------------------------

@dataclass
class FilterResult:
    kept: list[int]
    scores: np.ndarray
    normalized: np.ndarray
    lengths: np.ndarray
    fallback: bool = False


def _affine_fit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    design = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return design @ coef


def lm_filter(transcripts: Sequence[Sequence[int]], lm: TransformerLM, filter_fraction: float) -> FilterResult:
    """Drop the ``filter_fraction`` of transcripts with the worst length-normalized LM score.

    The score is the per-token negative log-likelihood (end-of-sentence
    included, so empty transcripts are scorable). Mean and spread are fitted
    as affine functions of the token length by least squares, the spread from
    absolute residuals scaled by sqrt(pi/2). If the fitted spread is not
    positive (beyond rounding noise) for some transcript the raw score is used instead, with a
    warning. Ties keep the earlier transcript.
    """
    if not 0.0 <= filter_fraction < 1.0:
        raise ValueError("filter_fraction must lie in [0, 1)")
    n = len(transcripts)
    lengths = np.array([len(t) for t in transcripts], dtype=np.float64)
    if n == 0:
        return FilterResult([], np.zeros(0), np.zeros(0), lengths)
    scores = np.array([-lm_score(lm, t, eos=True) / (len(t) + 1) for t in transcripts])
    mu = _affine_fit(lengths, scores)
    sigma = _affine_fit(lengths, np.abs(scores - mu) * math.sqrt(math.pi / 2))
    # spreads at rounding-noise level count as degenerate
    fallback = bool(np.any(sigma <= 1e-12 * max(1.0, float(np.abs(scores).max()))))
    if fallback:
        warnings.warn("fitted score spread is not positive; filtering on raw log-perplexity", stacklevel=2)
        normalized = scores.copy()
    else:
        normalized = (scores - mu) / sigma
    n_keep = math.ceil((1.0 - filter_fraction) * n - 1e-9)
    order = np.argsort(normalized, kind="stable")
    kept = sorted(order[:n_keep].tolist())
    return FilterResult(kept, scores, normalized, lengths, fallback)


# -- balancing -------------------------------------------------------------------

_KL_EPS = 1e-6
_KL_TOL = 1e-12


def token_distribution(transcripts: Sequence[Sequence[int]], vocab: int,
                       weights: Sequence[float] | None = None) -> np.ndarray:
    counts = _count_matrix(transcripts, vocab)
    w = np.ones(len(transcripts)) if weights is None else np.asarray(weights, float)
    c = w @ counts
    return c / c.sum()


def _count_matrix(transcripts: Sequence[Sequence[int]], vocab: int) -> np.ndarray:
    counts = np.zeros((len(transcripts), vocab))
    for i, t in enumerate(transcripts):
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= vocab):
            raise ValueError(f"transcript {i} has tokens outside a vocabulary of {vocab}")
        np.add.at(counts[i], t, 1.0)
    return counts


def kl_to_reference(reference: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """KL(reference || q) for count vectors along the last axis.

    q is the normalized count vector mixed with a tiny uniform floor, so the
    value is invariant to rescaling the counts.
    """
    total = counts.sum(-1, keepdims=True)
    q = np.divide(counts, total, out=np.full(counts.shape, 1.0 / counts.shape[-1]), where=total > 0)
    q = (1.0 - _KL_EPS) * q + _KL_EPS / counts.shape[-1]
    r = reference
    nz = r > 0
    return (r[nz] * (np.log(r[nz]) - np.log(q[..., nz]))).sum(-1)


@dataclass
class BalanceResult:
    weights: np.ndarray
    kl_trace: list[float]

    @property
    def uniform_kl(self) -> float:
        return self.kl_trace[0]


def balance(transcripts: Sequence[Sequence[int]], reference: np.ndarray, n_batches: int,
            pool_size: int = 256, seed: int = 0) -> BalanceResult:
    """Greedy integer re-weighting towards a reference token distribution.

    Weights start uniform at 1. Each greedy step looks at the next mini-pool
    of ``pool_size`` candidates and applies the single +1 or -1 weight change
    that lowers KL(reference || weighted distribution) the most; a step with
    no improving move leaves the weights alone. The search stops after
    ``n_batches`` steps or once a full pass over the pool finds nothing.
    ``kl_trace[0]`` is the uniform-weight KL.
    """
    if not transcripts:
        raise ValueError("cannot balance an empty transcript pool")
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 1 or np.any(reference < 0) or not np.isclose(reference.sum(), 1.0):
        raise ValueError("reference must be a probability vector over the vocabulary")
    counts = _count_matrix(transcripts, len(reference))
    n = len(transcripts)
    weights = np.ones(n)
    current = weights @ counts
    if current.sum() <= 0:
        raise ValueError("cannot balance a pool without any tokens")
    trace = [float(kl_to_reference(reference, current))]
    rng = make_rng(seed, "balance")
    order = rng.permutation(n)
    pos = 0
    idle = 0
    for _ in range(n_batches):
        cand = order[(pos + np.arange(min(pool_size, n))) % n]
        pos = (pos + len(cand)) % n
        moves = np.concatenate([counts[cand], -counts[cand]])
        signs = np.repeat([1.0, -1.0], len(cand))
        allowed = np.concatenate([np.ones(len(cand), bool), weights[cand] >= 1.0])
        trial = current[None] + moves
        allowed &= trial.sum(-1) > 0
        kl = np.where(allowed, kl_to_reference(reference, np.maximum(trial, 0.0)), np.inf)
        best = int(np.argmin(kl))
        if kl[best] < trace[-1] - _KL_TOL:
            i = cand[best % len(cand)]
            weights[i] += signs[best]
            current = current + moves[best]
            trace.append(float(kl[best]))
            idle = 0
        else:
            trace.append(trace[-1])
            idle += len(cand)
            if idle >= n:
                break
    return BalanceResult(weights, trace)


# -- pseudo-labeling -------------------------------------------------------------

@dataclass
class PseudoLabels:
    records: list[dict]
    skipped: list[dict] = field(default_factory=list)


def pseudo_label(teacher, lm: TransformerLM | None, fusion: FusionParams, unlabeled: Sequence[Utterance],
                 tokenizer: TokenizerModel, beam: int = 8, max_symbols_per_frame: int = 4) -> PseudoLabels:
    """Transcribe clean (never augmented) unlabeled features with the fused teacher.

    ``teacher`` is a :class:`TransducerModel` or any object exposing
    ``transcribe(frames) -> list[int]``. Records keep the ASR and LM scores
    for later filtering. Utterances whose decode raises are logged and
    listed in ``skipped``.
    """
    records, skipped = [], []
    for u in unlabeled:
        frames = u.features.frames[:u.features.valid_length]
        try:
            if isinstance(teacher, TransducerModel):
                hyp = decode_utterance(teacher, frames, lm, fusion, beam, max_symbols_per_frame)
                tokens, asr, lmp, score = list(hyp.tokens), hyp.asr_logp, hyp.lm_logp, fused_score(hyp, fusion)
            else:
                tokens = [int(t) for t in teacher.transcribe(frames)]
                asr, lmp, score = 0.0, 0.0, 0.0
        except Exception as e:  # noqa: BLE001 -- a bad utterance must not stop the pool
            log.warning("pseudo-labeling %s failed: %s", u.id, e)
            skipped.append({"id": u.id, "error": f"{type(e).__name__}: {e}"})
            continue
        records.append({"id": u.id, "tokens": tokens, "transcript": tokenizer.decode(tokens),
                        "asr_logp": asr, "lm_logp": lmp, "n_nonblank": len(tokens), "fused_score": score})
    return PseudoLabels(records, skipped)


# -- generations -----------------------------------------------------------------

DEFAULT_SCHEDULE = (("toy-small",), ("toy-small",), ("toy-large",), ("toy-large", "toy-large+"))


@dataclass(frozen=True)
class NstConfig:
    """Knobs of one noisy-student run; every field enters the artifact hash."""

    schedule: tuple[tuple[str, ...], ...] = DEFAULT_SCHEDULE
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    finetune_steps: int = 600
    mix: MixPolicy = field(default_factory=MixPolicy)
    filter_fraction: float = 0.0
    balance: bool = False
    balance_steps: int = 500
    fusion_grid: tuple[tuple[float, float], ...] = ((0.0, 0.0), (0.3, 0.0), (0.3, 0.5), (0.6, 1.0))
    beam: int = 4
    max_symbols_per_frame: int = 4
    n_mels: int = 16
    time_reduction: int = 2
    enc_out_dim: int = 48
    decoder_layers: int = 1
    decoder_dim: int = 48

    def __post_init__(self):
        if not self.schedule or any(not g for g in self.schedule):
            raise ValueError("schedule needs at least one generation with at least one variant")
        if not 0.0 <= self.filter_fraction < 1.0:
            raise ValueError("filter_fraction must lie in [0, 1)")

    def variants(self, generation: int) -> tuple[str, ...]:
        return self.schedule[min(generation, len(self.schedule) - 1)]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))


@dataclass
class NstData:
    supervised: list[Utterance]
    unlabeled: list[Utterance]
    dev: list[Utterance]
    tokenizer: TokenizerModel
    lm: TransformerLM | None = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for split in (self.supervised, self.unlabeled, self.dev):
            for u in split:
                h.update(u.id.encode())
                h.update(np.ascontiguousarray(u.features.frames[:u.features.valid_length]).tobytes())
                h.update((u.text or "").encode())
        h.update("\x00".join(self.tokenizer.pieces).encode())
        if self.lm is not None:
            for k, v in sorted(self.lm.state_dict().items()):
                h.update(k.encode())
                h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


@dataclass
class GenerationManifest:
    generation: int
    key: str
    status: str = "running"
    stage: str = "start"
    teacher_ckpt: str | None = None
    student_ckpt: str | None = None
    students: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=lambda: {"lambda": 0.0, "beta": 0.0})
    pseudo_manifest: str | None = None
    filter_fraction: float = 0.0
    balance: bool = False
    mix_ratio: str = "1:0"
    mix_mode: str = "batchwise"
    beam: int = 0
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    def __post_init__(self):
        if self.generation < 0:
            raise ValueError("generation must be >= 0")

    @property
    def dev_wer(self) -> float:
        return self.metrics["dev_wer"]

    def to_record(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping) -> "GenerationManifest":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in names})


MANIFEST_NAME = "manifest.jsonl"


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _append(path: Path, rec: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_generation_manifest(path: str | os.PathLike) -> GenerationManifest:
    """The latest record of a generation's manifest file."""
    lines = [line for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines:
        raise NstError(f"{path}: empty manifest")
    return GenerationManifest.from_record(json.loads(lines[-1]))


def _artifacts_intact(m: GenerationManifest) -> bool:
    return all(Path(p).exists() and file_digest(p) == h for p, h in m.artifacts.items())


def generation_key(prev: GenerationManifest | None, pretrained: Mapping[str, str], config: NstConfig,
                   data: NstData, seed: int) -> str:
    generation = 0 if prev is None else prev.generation + 1
    payload = {"generation": generation, "prev": None if prev is None else prev.key,
               "pretrained": {k: file_digest(p) for k, p in sorted(pretrained.items())},
               "config": config.to_dict(), "data": data.digest(), "seed": seed}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _pretrained_for(variant: str, pretrained: Mapping[str, str]) -> str:
    # a "+" variant shares its base model's pre-trainable sub-model
    for name in (variant, variant.rstrip("+")):
        if name in pretrained:
            return pretrained[name]
    raise NstError(f"no pre-trained checkpoint for variant {variant!r}")


def build_student(variant: str, config: NstConfig, vocab: int, pretrained_path: str | None,
                  seed: int) -> TransducerModel:
    """A fresh transducer whose encoder comes from the pre-trained checkpoint (never a teacher)."""
    enc = variant_config(variant, n_mels=config.n_mels, time_reduction=config.time_reduction)
    model = build_transducer(enc, variant_projection(variant, config.enc_out_dim),
                             DecoderConfig(vocab, config.decoder_layers, config.decoder_dim),
                             make_rng(seed, "student", variant))
    if pretrained_path is not None:
        arrays, _ = load_arrays(pretrained_path)
        groups = split_groups(arrays)
        checkpoint_transplant({**groups["params"], **groups["buffers"]}, model)
    return model


def supervised_pairs(utts: Sequence[Utterance], tokenizer: TokenizerModel) -> list[tuple[FeatureSequence, list[int]]]:
    return [(u.features, tokenizer.encode(u.text)) for u in utts]


def evaluate(model: TransducerModel, utts: Sequence[Utterance], tokenizer: TokenizerModel,
             lm: TransformerLM | None = None, fusion: FusionParams = FusionParams(), beam: int = 4,
             max_symbols_per_frame: int = 4) -> float:
    hyps = [decode_utterance(model, u.features.frames[:u.features.valid_length], lm, fusion, beam,
                             max_symbols_per_frame) for u in utts]
    return corpus_wer((u.text, tokenizer.decode(h.tokens)) for u, h in zip(utts, hyps))


def finetune_student(model: TransducerModel, sup: list, pseudo: list, config: NstConfig, seed: int,
                     weights: np.ndarray | None = None) -> list[float]:
    """Fine-tune with SpecAugment, evaluate-ready (EMA weights loaded, eval mode) on return."""
    batches = None
    cfg = config.finetune
    if pseudo:
        batches = strip_sources(mix_batches(sup, pseudo, config.mix, seed, weights))
    losses, ema, _ = train_transducer(model, sup, config.finetune_steps, cfg, seed, batches)
    load_ema(model, ema)
    model.eval()
    return losses


def run_generation(prev: GenerationManifest | None, pretrained: Mapping[str, str], config: NstConfig,
                   data: NstData, out_dir: str | os.PathLike, seed: int = 0) -> GenerationManifest:
    """Run (or resume) one generation and return its completed manifest.

    ``pretrained`` maps variant names to pre-trained checkpoints; a "+"
    variant falls back to its base name. Generation 0 fine-tunes on
    supervised data only. Later generations label the unlabeled pool with
    ``prev``'s student as the fused teacher. A generation whose directory
    already holds a completed manifest with intact artifacts is returned
    unchanged.
    """
    if prev is not None and prev.status != "complete":
        raise NstError("the teacher generation did not complete")
    k = 0 if prev is None else prev.generation + 1
    key = generation_key(prev, pretrained, config, data, seed)
    gdir = Path(out_dir) / f"gen{k}-{key[:12]}"
    mpath = gdir / MANIFEST_NAME
    if mpath.exists():
        done = read_generation_manifest(mpath)
        if done.status == "complete" and _artifacts_intact(done):
            return done
        mpath.unlink()
    gdir.mkdir(parents=True, exist_ok=True)
    m = GenerationManifest(k, key, filter_fraction=config.filter_fraction, balance=config.balance,
                           mix_mode=config.mix.mode, beam=config.beam)
    gseed = seed * 1000 + k
    tok = data.tokenizer

    def record(stage: str, **artifacts):
        m.stage = stage
        for p in artifacts.values():
            m.artifacts[str(p)] = file_digest(p)
        _append(mpath, m.to_record())

    def write_json(name: str, obj) -> Path:
        p = gdir / name
        p.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
        return p

    record("start")
    stage = "start"
    try:
        sup = supervised_pairs(data.supervised, tok)
        pseudo: list = []
        weights = None
        if prev is not None:
            stage = "tune_fusion"
            teacher, _ = load_transducer(prev.student_ckpt)
            m.teacher_ckpt = prev.student_ckpt
            dev = [(u.features.frames[:u.features.valid_length], u.text) for u in data.dev]
            grid = config.fusion_grid if data.lm is not None else ((0.0, 0.0),)
            tuning = tune_fusion(teacher, data.lm, dev, grid, config.beam, tok.decode,
                                 config.max_symbols_per_frame)
            m.fusion = {"lambda": tuning.best.lam, "beta": tuning.best.beta}
            m.metrics["teacher_dev_wer_fused"] = min(r["wer"] for r in tuning.log)
            record(stage, fusion_log=write_json("fusion.json", tuning.log))

            stage = "pseudo_label"
            labels = pseudo_label(teacher, data.lm, tuning.best, data.unlabeled, tok, config.beam,
                                  config.max_symbols_per_frame)
            p = gdir / "pseudo.jsonl"
            p.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in labels.records))
            m.pseudo_manifest = str(p)
            m.metrics["pseudo_labeled"] = len(labels.records)
            m.metrics["pseudo_skipped"] = len(labels.skipped)
            record(stage, pseudo=p)

            by_id = {u.id: u for u in data.unlabeled}
            recs = labels.records
            if config.filter_fraction > 0:
                stage = "filter"
                if data.lm is None:
                    raise NstError("LM filtering requested without an LM")
                res = lm_filter([r["tokens"] for r in recs], data.lm, config.filter_fraction)
                recs = [recs[i] for i in res.kept]
                record(stage, filter=write_json("filter.json", {"kept": [r["id"] for r in recs],
                                                                 "fallback": res.fallback}))
            if config.balance and not any(r["tokens"] for r in recs):
                warnings.warn("no pseudo-label tokens to balance; keeping uniform weights", stacklevel=2)
            elif config.balance:
                stage = "balance"
                ref = token_distribution([t for _, t in sup], len(tok))
                bal = balance([r["tokens"] for r in recs], ref, config.balance_steps, seed=gseed)
                weights = bal.weights
                record(stage, balance=write_json("balance.json", {"weights": weights.tolist(),
                                                                   "kl_trace": bal.kl_trace}))
            pseudo = [(by_id[r["id"]].features, r["tokens"]) for r in recs]
            m.mix_ratio = config.mix.ratio

        stage = "finetune"
        best = None
        for variant in config.variants(k):
            student = build_student(variant, config, len(tok), _pretrained_for(variant, pretrained), gseed)
            losses = finetune_student(student, sup, pseudo, config, gseed, weights)
            w = evaluate(student, data.dev, tok, beam=config.beam,
                         max_symbols_per_frame=config.max_symbols_per_frame)
            path = gdir / f"student-{variant}.ckpt"
            save_transducer(path, student, {"generation": k, "variant": variant})
            m.students[variant] = {"ckpt": str(path), "dev_wer": w, "final_loss": float(np.mean(losses[-20:]))}
            record(stage, **{variant: path})
            if best is None or w < best[1]:
                best = (variant, w)
        stage = "evaluate"
        m.student_ckpt = m.students[best[0]]["ckpt"]
        m.metrics["dev_wer"] = best[1]
        m.metrics["student_variant"] = best[0]
        m.status = "complete"
        record("complete")
    except Exception as e:
        m.status = "failed"
        m.error = f"{type(e).__name__}: {e}"
        record(stage)
        raise StageFailed(f"generation {k} failed at stage {stage}: {m.error}", m) from e
    return m


def run_nst(pretrained: Mapping[str, str], config: NstConfig, data: NstData, out_dir: str | os.PathLike,
            generations: int, seed: int = 0) -> list[GenerationManifest]:
    """Generations 0..generations-1, each student becoming the next teacher."""
    out = []
    prev = None
    for _ in range(generations):
        prev = run_generation(prev, pretrained, config, data, out_dir, seed)
        out.append(prev)
    return out
