"""Tiny end-to-end run: synthetic data, LM, pre-training and two noisy-student generations.

Runs in about two minutes on one core by shrinking the unlabeled pool, dev set and schedules. Use ``semisup-asr nst-run --seed 0``
for the desk-scale configuration.

    python demos/quickstart.py [out_dir]
"""

import sys

from semisup_asr.experiment import build_config, run_pipeline

SMALL = ["synth.n_unlabeled=150", "synth.n_dev=30", "pretrain.steps=150", "finetune.steps=300"]


def main(out: str) -> None:
    cfg = build_config({}, SMALL, seed=0, out=out)
    result = run_pipeline(cfg, generations=2, scratch_baseline=True)
    for dataset, metric, value, gen in result.metrics:
        label = metric if gen is None else f"{metric} (generation {gen})"
        print(f"{dataset:>4} {label:<34} {value:.3f}")
    for m in result.manifests:
        print(f"generation {m.generation}: student {m.metrics['student_variant']}, fusion {m.fusion}, "
              f"dir {m.student_ckpt.rsplit('/', 2)[-2]}")
    print(f"artifacts under {result.out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart")
