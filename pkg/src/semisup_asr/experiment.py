"""Experiment configuration and the desk-scale pipeline stages behind the CLI.

A configuration is a nested JSON object. Defaults live in :data:`DEFAULTS`;
user files and ``section.key=value`` overrides are merged over them and
checked field by field, so a typo or a wrongly typed value fails with the
offending dotted path.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .encoder import format_encoder_config, parse_encoder_config, variant_config
from .frontend import SegmentationPolicy, SpecAugmentPolicy
from .nst import MixPolicy, NstConfig, NstData, evaluate, finetune_student, build_student, supervised_pairs
from .numcore import Optimizer, OptimizerConfig, load_arrays, make_rng, save_checkpoint, split_groups
from .pretrain import ContrastiveConfig, PretrainMaskPolicy, PretrainModel, make_segments, train_pretrain
from .synth import SyntheticTaskSpec, Utterance, synth_generate
from .textkit import LmConfig, TokenizerModel, TransformerLM, train_lm, train_wpm
from .transducer import FinetuneConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the dotted field."""


DEFAULTS: dict[str, Any] = {
    "seed": None,
    "out": "runs/desk",
    "synth": {f.name: (list(f.default) if isinstance(f.default, tuple) else f.default)
              for f in dataclasses.fields(SyntheticTaskSpec)},
    "tokenizer": {"budget": 20},
    "lm": {"n_layers": 1, "model_dim": 32, "n_heads": 4, "context_len": 64, "steps": 300,
           "batch_size": 32, "lr": 3e-3},
    "frontend": {
        "spec_augment": {"n_freq_masks": 2, "F": 5, "n_time_masks": 10, "p_S": 0.05},
        "segment": {"min_len": 32.0, "max_len": 64.0, "chunk_len": 32.0},
        "frame_rate": 2.0,
    },
    "encoder": {"variant": "toy-small", "time_reduction": 2, "out_dim": 48},
    "decoder": {"n_lstm_layers": 1, "dim": 48},
    "pretrain": {"steps": 300, "batch_size": 8, "lr": 2e-3, "warmup": 100, "mask_prob": 0.065,
                 "mask_span": 10, "n_distractors": 10, "temperature": 0.1},
    "finetune": {"steps": 600, "batch_size": 8, "encoder_lr": 2e-3, "encoder_warmup": 100,
                 "decoder_lr": 4e-3, "decoder_warmup": 50, "grad_norm_cap": 20.0, "ema_decay": 0.99},
    "nst": {"generations": 2,
            "schedule": [["toy-small"], ["toy-small"], ["toy-large"], ["toy-large", "toy-large+"]],
            "mix_ratio": "1:9", "mix_mode": "batchwise", "filter_fraction": 0.0, "balance": False,
            "balance_steps": 500, "beam": 4, "max_symbols_per_frame": 4,
            "fusion_grid": [[0.0, 0.0], [0.3, 0.0], [0.3, 0.5], [0.6, 1.0]]},
}


def _check(value, default, path: str):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        unknown = sorted(set(value) - set(default))
        if unknown:
            raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
        return {k: _check(value.get(k, default[k]), default[k], f"{path}.{k}" if path else k) for k in default}
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return copy.deepcopy(value)
    return value


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as JSON when possible, else kept as text."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected dotted.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def build_config(base: Mapping | None = None, overrides: Sequence[str] = (), seed: int | None = None,
                 out: str | None = None) -> dict:
    cfg = copy.deepcopy(dict(base or {}))
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{'.'.join(keys)}: {k} is not a section")
        node[keys[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    cfg = _check(cfg, DEFAULTS, "")
    if cfg["seed"] is None:
        raise ConfigError("seed: required (set it in the config or pass --seed)")
    _validate(cfg)
    return cfg


def load_config(path: str | os.PathLike | None, overrides: Sequence[str] = (), seed: int | None = None,
                out: str | None = None) -> dict:
    base = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            base = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return build_config(base, overrides, seed, out)


def _validate(cfg: dict) -> None:
    """Semantic checks, reported against the dotted field."""
    def guard(path, fn):
        try:
            return fn()
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{path}: {e}") from None

    guard("synth", lambda: synthetic_spec(cfg))
    guard("frontend.spec_augment", lambda: spec_policy(cfg))
    guard("frontend.segment", lambda: segment_policy(cfg))
    guard("encoder", lambda: encoder_config(cfg))
    guard("finetune", lambda: finetune_config(cfg))
    guard("nst", lambda: nst_config(cfg))
    guard("pretrain", lambda: (PretrainMaskPolicy(cfg["pretrain"]["mask_prob"], cfg["pretrain"]["mask_span"]),
                               contrastive_config(cfg)))
    if cfg["frontend"]["spec_augment"]["F"] > cfg["synth"]["n_mels"]:
        raise ConfigError("frontend.spec_augment.F: exceeds synth.n_mels")
    if cfg["tokenizer"]["budget"] < 1:
        raise ConfigError("tokenizer.budget: must be positive")
    for k in ("steps",):
        for sec in ("lm", "pretrain", "finetune"):
            if cfg[sec][k] < 0:
                raise ConfigError(f"{sec}.{k}: must be >= 0")


# -- typed views -----------------------------------------------------------------

def synthetic_spec(cfg: Mapping) -> SyntheticTaskSpec:
    s = dict(cfg["synth"])
    for k, v in s.items():
        if isinstance(v, list):
            s[k] = tuple(v)
    return SyntheticTaskSpec(**s)


def spec_policy(cfg: Mapping) -> SpecAugmentPolicy:
    return SpecAugmentPolicy(**cfg["frontend"]["spec_augment"])


def segment_policy(cfg: Mapping) -> SegmentationPolicy:
    return SegmentationPolicy(**cfg["frontend"]["segment"])


def encoder_config(cfg: Mapping, variant: str | None = None):
    e = cfg["encoder"]
    return variant_config(variant or e["variant"], n_mels=cfg["synth"]["n_mels"],
                          time_reduction=e["time_reduction"])


def contrastive_config(cfg: Mapping) -> ContrastiveConfig:
    p = cfg["pretrain"]
    return ContrastiveConfig(p["n_distractors"], p["temperature"])


def finetune_config(cfg: Mapping) -> FinetuneConfig:
    f = cfg["finetune"]
    return FinetuneConfig(
        encoder_opt=OptimizerConfig(kind="adam", peak_lr=f["encoder_lr"], warmup_steps=f["encoder_warmup"],
                                    grad_norm_cap=f["grad_norm_cap"]),
        decoder_opt=OptimizerConfig(kind="adam", peak_lr=f["decoder_lr"], warmup_steps=f["decoder_warmup"],
                                    grad_norm_cap=f["grad_norm_cap"]),
        ema_decay=f["ema_decay"], spec_augment=spec_policy(cfg), batch_size=f["batch_size"])


def nst_config(cfg: Mapping) -> NstConfig:
    n = cfg["nst"]
    return NstConfig(
        schedule=tuple(tuple(g) for g in n["schedule"]),
        finetune=finetune_config(cfg),
        finetune_steps=cfg["finetune"]["steps"],
        mix=MixPolicy.from_ratio(n["mix_ratio"], n["mix_mode"]),
        filter_fraction=n["filter_fraction"],
        balance=n["balance"],
        balance_steps=n["balance_steps"],
        fusion_grid=tuple((float(a), float(b)) for a, b in n["fusion_grid"]),
        beam=n["beam"],
        max_symbols_per_frame=n["max_symbols_per_frame"],
        n_mels=cfg["synth"]["n_mels"],
        time_reduction=cfg["encoder"]["time_reduction"],
        enc_out_dim=cfg["encoder"]["out_dim"],
        decoder_layers=cfg["decoder"]["n_lstm_layers"],
        decoder_dim=cfg["decoder"]["dim"],
    )


# -- stages ----------------------------------------------------------------------

def make_task(cfg: Mapping):
    return synth_generate(synthetic_spec(cfg), cfg["seed"])


def train_tokenizer(cfg: Mapping, texts: Sequence[str]) -> TokenizerModel:
    return train_wpm(list(texts), cfg["tokenizer"]["budget"])


def lm_config(cfg: Mapping, vocab: int) -> LmConfig:
    c = cfg["lm"]
    return LmConfig(vocab, n_layers=c["n_layers"], model_dim=c["model_dim"], n_heads=c["n_heads"],
                    context_len=c["context_len"])


def train_language_model(cfg: Mapping, tokenizer: TokenizerModel, texts: Sequence[str]) -> TransformerLM:
    c = cfg["lm"]
    lm = TransformerLM(lm_config(cfg, len(tokenizer)), make_rng(cfg["seed"], "lm"))
    opt = OptimizerConfig(kind="adam", peak_lr=c["lr"], warmup_steps=max(1, c["steps"] // 10), grad_norm_cap=5.0)
    train_lm(lm, [tokenizer.encode(t) for t in texts], c["steps"], c["batch_size"], opt, cfg["seed"])
    lm.eval()
    return lm


def save_lm(path: str | os.PathLike, lm: TransformerLM) -> None:
    save_checkpoint(path, lm, meta={"lm": dataclasses.asdict(lm.config)})


def load_lm(path: str | os.PathLike) -> TransformerLM:
    arrays, meta = load_arrays(path)
    lm = TransformerLM(LmConfig(**meta["lm"]), make_rng(0, "load"))
    params = dict(lm.named_parameters())
    for k, v in split_groups(arrays)["params"].items():
        params[k].data = v.copy()
    lm.eval()
    return lm


def pretrain_encoder(cfg: Mapping, unlabeled: Sequence[Utterance], variant: str | None = None) -> PretrainModel:
    p = cfg["pretrain"]
    seed = cfg["seed"]
    enc = encoder_config(cfg, variant)
    model = PretrainModel(enc, contrastive_config(cfg), make_rng(seed, "pretrain-init", enc.variant))
    seg = segment_policy(cfg)
    rate = cfg["frontend"]["frame_rate"]
    segments = make_segments([u.features for u in unlabeled], seg, rate, seed)
    opt = Optimizer(dict(model.named_parameters()),
                    OptimizerConfig(kind="adam", peak_lr=p["lr"], warmup_steps=p["warmup"]))
    model.losses = train_pretrain(model, segments, p["steps"], opt, p["batch_size"], seg.chunk_len, rate,
                                  PretrainMaskPolicy(p["mask_prob"], p["mask_span"]), contrastive_config(cfg), seed)
    return model


def pretrain_key(cfg: Mapping, variant: str | None = None) -> str:
    """Hash of everything the pre-trained checkpoint depends on."""
    import hashlib

    keys = ("seed", "synth", "frontend", "encoder", "pretrain")
    payload = {k: cfg[k] for k in keys} | {"variant": variant or cfg["encoder"]["variant"]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_pretrained(path: str | os.PathLike, model: PretrainModel) -> None:
    save_checkpoint(path, model, meta={"encoder": format_encoder_config(model.config)})


def pretrained_variant(path: str | os.PathLike) -> str:
    return parse_encoder_config(load_arrays(path)[1]["encoder"]).variant


def finetune_model(cfg: Mapping, tokenizer: TokenizerModel, supervised: Sequence[Utterance],
                   pretrained: str | None, pseudo: Sequence = (), weights=None, variant: str | None = None,
                   seed_offset: int = 0):
    """A supervised (plus optional pseudo-labeled) student; from scratch when ``pretrained`` is None."""
    nc = nst_config(cfg)
    seed = cfg["seed"] * 1000 + seed_offset
    model = build_student(variant or cfg["encoder"]["variant"], nc, len(tokenizer), pretrained, seed)
    losses = finetune_student(model, supervised_pairs(supervised, tokenizer), list(pseudo), nc, seed, weights)
    return model, losses


def nst_data(task, tokenizer: TokenizerModel, lm: TransformerLM | None) -> NstData:
    return NstData(task.supervised, task.unlabeled, task.dev, tokenizer, lm)


def dev_wer(cfg: Mapping, model, utts: Sequence[Utterance], tokenizer: TokenizerModel) -> float:
    n = cfg["nst"]
    return evaluate(model, utts, tokenizer, beam=n["beam"], max_symbols_per_frame=n["max_symbols_per_frame"])


def metric_line(dataset: str, metric: str, value: float, generation: int | None = None) -> str:
    return json.dumps({"dataset": dataset, "metric": metric, "value": value, "generation": generation},
                      sort_keys=True)


def write_metrics(path: str | os.PathLike, rows: Sequence[tuple]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(metric_line(*r) + "\n" for r in rows))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def needed_pretrained(schedule: Sequence[Sequence[str]], generations: int) -> list[str]:
    """Base variants whose pre-trained checkpoints the first ``generations`` need."""
    names = []
    for k in range(generations):
        for v in schedule[min(k, len(schedule) - 1)]:
            base = v.rstrip("+")
            if base not in names:
                names.append(base)
    return names


@dataclasses.dataclass
class PipelineResult:
    manifests: list
    metrics: list[tuple]
    out_dir: Path


def run_pipeline(cfg: Mapping, generations: int | None = None, scratch_baseline: bool = False,
                 out_dir: str | os.PathLike | None = None) -> PipelineResult:
    """Synthetic data, tokenizer, LM, pre-training and the noisy-student generations.

    Writes ``metrics.jsonl`` (one line per dataset/metric/generation) and
    ``generations.tsv`` (generation vs dev WER) under the output directory.
    """
    from .nst import run_nst
    from .synth import write_manifest

    out = Path(out_dir or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    generations = cfg["nst"]["generations"] if generations is None else generations
    task = make_task(cfg)
    data_dir = out / "data"
    for split in ("supervised", "unlabeled", "dev"):
        write_manifest(data_dir / f"{split}.jsonl", getattr(task, split), data_dir / "features")
    (data_dir / "lm_text.txt").write_text("".join(t + "\n" for t in task.lm_text))
    tok = train_tokenizer(cfg, [u.text for u in task.supervised])
    tok.save(out / "tokenizer.txt")
    lm = train_language_model(cfg, tok, task.lm_text)
    save_lm(out / "lm.ckpt", lm)
    pretrained = {}
    for variant in needed_pretrained(cfg["nst"]["schedule"], generations):
        path = out / f"pretrained-{variant}-{pretrain_key(cfg, variant)[:12]}.ckpt"
        if not path.exists():
            save_pretrained(path, pretrain_encoder(cfg, task.unlabeled, variant))
        pretrained[variant] = str(path)
    metrics = []
    if scratch_baseline:
        model, _ = finetune_model(cfg, tok, task.supervised, None)
        metrics.append(("dev", "wer_scratch", dev_wer(cfg, model, task.dev, tok), None))
    manifests = run_nst(pretrained, nst_config(cfg), nst_data(task, tok, lm), out / "generations",
                        generations, cfg["seed"])
    for m in manifests:
        metrics.append(("dev", "wer", m.metrics["dev_wer"], m.generation))
        if "teacher_dev_wer_fused" in m.metrics:
            metrics.append(("dev", "teacher_wer_fused", m.metrics["teacher_dev_wer_fused"], m.generation - 1))
    write_metrics(out / "metrics.jsonl", metrics)
    (out / "generations.tsv").write_text(
        "generation\tdev_wer\n" + "".join(f"{m.generation}\t{m.metrics['dev_wer']:.6f}\n" for m in manifests))
    return PipelineResult(manifests, metrics, out)
