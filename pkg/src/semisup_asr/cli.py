"""Command-line entry points.

Every command reads and writes manifest/checkpoint files only, is a pure
function of (config, inputs, seed) and reports metrics as JSON lines with
the keys ``dataset``, ``metric``, ``value`` and ``generation``.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import experiment as ex
from .nst import (
    MixPolicy,
    StageFailed,
    balance,
    lm_filter,
    mix_batches,
    pseudo_label,
    token_distribution,
    tune_fusion,
)
from .synth import read_manifest, write_manifest
from .textkit import FusionParams, TokenizerModel, corpus_wer
from .transducer import decode_record, decode_utterance, load_transducer, save_transducer, write_decode_manifest


class InputError(ValueError):
    pass


def _jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"input file {path} does not exist")
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def _need(path, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise InputError(f"--{what}: file {path} does not exist")
    return Path(path)


def _emit(args, rows: Sequence[tuple]) -> None:
    out = Path(args.out)
    ex.write_metrics(out / f"{args.command}.metrics.jsonl", rows)
    for r in rows:
        print(ex.metric_line(*r))


def _fusion(args) -> FusionParams:
    return FusionParams(args.lam, args.beta)


# -- commands --------------------------------------------------------------------

def cmd_synth(args, cfg):
    task = ex.make_task(cfg)
    data = Path(args.out) / "data"
    for split in ("supervised", "unlabeled", "dev"):
        write_manifest(data / f"{split}.jsonl", getattr(task, split), data / "features")
    (data / "lm_text.txt").write_text("".join(t + "\n" for t in task.lm_text))
    _emit(args, [(s, "utterances", float(len(getattr(task, s))), None) for s in ("supervised", "unlabeled", "dev")])


def cmd_tokenizer_train(args, cfg):
    texts = [r["text"] for r in _jsonl(args.manifest) if "text" in r]
    tok = ex.train_tokenizer(cfg, texts)
    tok.save(Path(args.out) / "tokenizer.txt")
    _emit(args, [("train", "vocab_size", float(len(tok)), None)])


def cmd_lm_train(args, cfg):
    tok = TokenizerModel.load(_need(args.tokenizer, "tokenizer"))
    texts = [t for t in _need(args.text, "text").read_text().splitlines() if t.strip()]
    lm = ex.train_language_model(cfg, tok, texts)
    ex.save_lm(Path(args.out) / "lm.ckpt", lm)
    from .textkit import log_perplexity

    ppl = float(np.mean([log_perplexity(lm, tok.encode(t)) for t in texts[:200]]))
    _emit(args, [("lm_text", "log_perplexity", ppl, None)])


def cmd_pretrain(args, cfg):
    unl = read_manifest(_need(args.manifest, "manifest"))
    variant = args.variant or cfg["encoder"]["variant"]
    model = ex.pretrain_encoder(cfg, unl, variant)
    ex.save_pretrained(Path(args.out) / f"pretrained-{variant}.ckpt", model)
    _emit(args, [("unlabeled", "contrastive_loss_first", float(np.mean(model.losses[:10])), None),
                 ("unlabeled", "contrastive_loss_last", float(np.mean(model.losses[-10:])), None)])


def _pseudo_items(pseudo_path, unlabeled_path):
    recs = _jsonl(pseudo_path)
    by_id = {u.id: u for u in read_manifest(_need(unlabeled_path, "unlabeled"))}
    missing = [r["id"] for r in recs if r["id"] not in by_id]
    if missing:
        raise InputError(f"pseudo-label ids missing from the unlabeled manifest: {missing[:3]}")
    return recs, [(by_id[r["id"]].features, r["tokens"]) for r in recs]


def cmd_finetune(args, cfg):
    tok = TokenizerModel.load(_need(args.tokenizer, "tokenizer"))
    sup = read_manifest(_need(args.manifest, "manifest"))
    pre = str(_need(args.pretrained, "pretrained")) if args.pretrained else None
    variant = ex.pretrained_variant(pre) if pre else cfg["encoder"]["variant"]
    pseudo, weights = [], None
    if args.pseudo:
        _, pseudo = _pseudo_items(args.pseudo, args.unlabeled)
        if args.weights:
            weights = np.asarray(json.loads(_need(args.weights, "weights").read_text())["weights"])
    model, losses = ex.finetune_model(cfg, tok, sup, pre, pseudo, weights, variant, args.generation)
    save_transducer(Path(args.out) / "model.ckpt", model, {"variant": variant})
    rows = [("supervised", "final_loss", float(np.mean(losses[-20:])), args.generation)]
    if args.dev:
        rows.append(("dev", "wer", ex.dev_wer(cfg, model, read_manifest(args.dev), tok), args.generation))
    _emit(args, rows)


def cmd_pseudolabel(args, cfg):
    tok = TokenizerModel.load(_need(args.tokenizer, "tokenizer"))
    teacher, _ = load_transducer(_need(args.model, "model"))
    lm = ex.load_lm(_need(args.lm, "lm")) if args.lm else None
    n = cfg["nst"]
    fusion = _fusion(args)
    rows = []
    if args.dev:
        dev = [(u.features.frames[:u.features.valid_length], u.text) for u in read_manifest(args.dev)]
        grid = [tuple(g) for g in n["fusion_grid"]] if lm is not None else [(0.0, 0.0)]
        tuning = tune_fusion(teacher, lm, dev, grid, n["beam"], tok.decode, n["max_symbols_per_frame"])
        fusion = tuning.best
        rows.append(("dev", "wer_fused", min(r["wer"] for r in tuning.log), None))
    labels = pseudo_label(teacher, lm, fusion, read_manifest(_need(args.unlabeled, "unlabeled")), tok,
                          n["beam"], n["max_symbols_per_frame"])
    out = Path(args.out) / "pseudo.jsonl"
    out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in labels.records))
    rows += [("unlabeled", "labeled", float(len(labels.records)), None),
             ("unlabeled", "skipped", float(len(labels.skipped)), None)]
    _emit(args, rows)


def cmd_filter(args, cfg):
    recs = _jsonl(args.pseudo)
    lm = ex.load_lm(_need(args.lm, "lm"))
    frac = cfg["nst"]["filter_fraction"] if args.fraction is None else args.fraction
    try:
        res = lm_filter([r["tokens"] for r in recs], lm, frac)
    except ValueError as e:
        raise InputError(str(e)) from None
    kept = [recs[i] for i in res.kept]
    (Path(args.out) / "pseudo.filtered.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
    _emit(args, [("pseudo", "kept", float(len(kept)), None), ("pseudo", "dropped", float(len(recs) - len(kept)), None)])


def cmd_balance(args, cfg):
    tok = TokenizerModel.load(_need(args.tokenizer, "tokenizer"))
    recs = _jsonl(args.pseudo)
    ref_texts = [r["text"] for r in _jsonl(args.reference) if "text" in r]
    ref = token_distribution([tok.encode(t) for t in ref_texts], len(tok))
    try:
        res = balance([r["tokens"] for r in recs], ref, cfg["nst"]["balance_steps"], seed=cfg["seed"])
    except ValueError as e:
        raise InputError(f"{args.pseudo}: {e}") from None
    (Path(args.out) / "balance.json").write_text(json.dumps(
        {"ids": [r["id"] for r in recs], "weights": res.weights.tolist(), "kl_trace": res.kl_trace},
        sort_keys=True) + "\n")
    _emit(args, [("pseudo", "kl_uniform", res.kl_trace[0], None), ("pseudo", "kl_balanced", res.kl_trace[-1], None)])


def cmd_mix_preview(args, cfg):
    sup = [r["id"] for r in _jsonl(args.supervised)]
    psd = [r["id"] for r in _jsonl(args.pseudo)]
    policy = MixPolicy.from_ratio(cfg["nst"]["mix_ratio"], cfg["nst"]["mix_mode"])
    batches = list(itertools.islice(mix_batches(sup, psd, policy, cfg["seed"]), args.n_batches))
    lines = [json.dumps({"batch": i, "items": [{"source": s, "id": x} for s, x in b]}, sort_keys=True)
             for i, b in enumerate(batches)]
    (Path(args.out) / "mix_preview.jsonl").write_text("".join(line + "\n" for line in lines))
    frac = sum(s == "supervised" for b in batches for s, _ in b) / max(1, sum(len(b) for b in batches))
    _emit(args, [("mix", "supervised_fraction", frac, None)])


def cmd_decode(args, cfg):
    tok = TokenizerModel.load(_need(args.tokenizer, "tokenizer"))
    model, _ = load_transducer(_need(args.model, "model"))
    lm = ex.load_lm(_need(args.lm, "lm")) if args.lm else None
    fusion = _fusion(args)
    n = cfg["nst"]
    records = []
    for u in read_manifest(_need(args.manifest, "manifest")):
        hyp = decode_utterance(model, u.features.frames[:u.features.valid_length], lm, fusion, n["beam"],
                               n["max_symbols_per_frame"])
        records.append(decode_record(u.id, hyp, fusion, tok.decode(hyp.tokens)))
    write_decode_manifest(Path(args.out) / "decode.jsonl", records)
    _emit(args, [("decode", "utterances", float(len(records)), None)])


def cmd_evaluate(args, cfg):
    def texts(path):
        out = {}
        for r in _jsonl(path):
            if "transcript" in r:
                out[r["id"]] = r["transcript"]
            elif "text" in r:
                out[r["id"]] = r["text"]
        return out

    ref, hyp = texts(args.ref), texts(args.hyp)
    missing = sorted(set(ref) - set(hyp))
    if missing:
        raise InputError(f"hypotheses missing for {len(missing)} references, e.g. {missing[0]}")
    w = corpus_wer((ref[k], hyp[k]) for k in sorted(ref))
    _emit(args, [(args.dataset, "wer", w, args.generation)])


def cmd_nst_run(args, cfg):
    res = ex.run_pipeline(cfg, args.generations, args.scratch_baseline, args.out)
    for m in res.manifests:
        print(json.dumps({"generation": m.generation, "stage": m.stage, "student_ckpt": m.student_ckpt,
                          "dev_wer": m.metrics["dev_wer"]}, sort_keys=True))


ABLATION_ALIASES = {"reduction": "encoder.time_reduction", "segment": "frontend.segment.chunk_len"}


def parse_grid(items: Sequence[str]) -> list[tuple[str, list]]:
    axes = []
    for item in items:
        if "=" not in item:
            raise ex.ConfigError(f"--grid {item!r}: expected name=v1,v2")
        name, raw = item.split("=", 1)
        values = []
        for v in raw.split(","):
            v = v.strip()
            if name == "reduction" and v.lower().endswith("x"):
                v = v[:-1]
            _, parsed = ex.parse_override(f"x={v}")
            values.append(parsed)
        axes.append((name, values))
    return axes


def cmd_ablate(args, cfg):
    axes = parse_grid(args.grid)
    out = Path(args.out)
    rows, table = [], []
    for combo in itertools.product(*[vals for _, vals in axes]):
        overrides = [f"{ABLATION_ALIASES.get(n, n)}={json.dumps(v)}" for (n, _), v in zip(axes, combo)]
        cell = ex.build_config(cfg, overrides)
        task = ex.make_task(cell)
        tok = ex.train_tokenizer(cell, [u.text for u in task.supervised])
        pre = out / ("pretrained-" + "-".join(f"{n}{v}" for (n, _), v in zip(axes, combo)) + ".ckpt")
        ex.save_pretrained(pre, ex.pretrain_encoder(cell, task.unlabeled))
        model, _ = ex.finetune_model(cell, tok, task.supervised, str(pre))
        w = ex.dev_wer(cell, model, task.dev, tok)
        table.append(list(combo) + [w])
        rows.append(("dev", "wer[" + ",".join(f"{n}={v}" for (n, _), v in zip(axes, combo)) + "]", w, None))
    header = "\t".join([n for n, _ in axes] + ["dev_wer"])
    body = "".join("\t".join(str(x) for x in r[:-1]) + f"\t{r[-1]:.6f}\n" for r in table)
    (out / "ablation.tsv").write_text(header + "\n" + body)
    if len(axes) == 2:
        (n1, v1), (n2, v2) = axes
        lines = [f"{n1}\\{n2}\t" + "\t".join(str(v) for v in v2)]
        for a in v1:
            lines.append(str(a) + "\t" + "\t".join(f"{r[-1]:.4f}" for r in table if r[0] == a))
        (out / "ablation_table.tsv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    _emit(args, rows)


COMMANDS = {
    "synth": cmd_synth,
    "tokenizer-train": cmd_tokenizer_train,
    "lm-train": cmd_lm_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "pseudolabel": cmd_pseudolabel,
    "filter": cmd_filter,
    "balance": cmd_balance,
    "mix-preview": cmd_mix_preview,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "nst-run": cmd_nst_run,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted config overrides")

    p = argparse.ArgumentParser(prog="semisup-asr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, **flags):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        for flag, kw in flags.items():
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, **kw)
        return sp

    add("synth", "write synthetic supervised/unlabeled/dev manifests")
    add("tokenizer-train", "train the word-piece model", manifest=dict(required=True))
    add("lm-train", "train the transformer LM", tokenizer=dict(required=True), text=dict(required=True))
    add("pretrain", "contrastive pre-training", manifest=dict(required=True), variant=dict())
    add("finetune", "transducer fine-tuning", manifest=dict(required=True), tokenizer=dict(required=True),
        pretrained=dict(), pseudo=dict(), unlabeled=dict(), weights=dict(), dev=dict(),
        generation=dict(type=int, default=0))
    fusion = dict(lam=dict(type=float, default=0.0), beta=dict(type=float, default=0.0))
    add("pseudolabel", "label unlabeled audio with a fused teacher", model=dict(required=True),
        unlabeled=dict(required=True), tokenizer=dict(required=True), lm=dict(), dev=dict(), **fusion)
    add("filter", "LM-score filtering of pseudo-labels", pseudo=dict(required=True), lm=dict(required=True),
        fraction=dict(type=float))
    add("balance", "token-distribution balancing weights", pseudo=dict(required=True),
        reference=dict(required=True), tokenizer=dict(required=True))
    add("mix-preview", "show the first mixed batches", supervised=dict(required=True), pseudo=dict(required=True),
        n_batches=dict(type=int, default=5))
    add("decode", "beam-search a manifest", model=dict(required=True), manifest=dict(required=True),
        tokenizer=dict(required=True), lm=dict(), **fusion)
    add("evaluate", "WER of hypotheses against references", ref=dict(required=True), hyp=dict(required=True),
        dataset=dict(default="dev"), generation=dict(type=int))
    add("nst-run", "full noisy-student loop on the synthetic task", generations=dict(type=int),
        scratch_baseline=dict(action="store_true"))
    add("ablate", "grid over config values, pre-train + fine-tune per cell", grid=dict(nargs="+", required=True))
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ex.load_config(args.config, args.overrides, args.seed, args.out)
        args.out = cfg["out"]
        Path(args.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except ex.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except StageFailed as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
