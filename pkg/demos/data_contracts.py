"""The three pseudo-label data knobs on toy inputs: mixing, LM filtering and balancing.

    python demos/data_contracts.py
"""

import itertools

import numpy as np

from semisup_asr.nst import SUPERVISED, MixPolicy, balance, lm_filter, mix_batches
from semisup_asr.numcore import make_rng
from semisup_asr.textkit import LmConfig, TransformerLM, train_lm


def show_mixing() -> None:
    sup, pseudo = [f"s{i}" for i in range(20)], [f"p{i}" for i in range(180)]
    for policy in (MixPolicy.from_ratio("1:9"), MixPolicy.from_ratio("2:8"), MixPolicy("pooled", 1, 9)):
        batches = list(itertools.islice(mix_batches(sup, pseudo, policy, seed=0), 1000))
        per_batch = [sum(s == SUPERVISED for s, _ in b) for b in batches]
        print(f"{policy.mode:>9} {policy.ratio}: supervised per batch min {min(per_batch)} max {max(per_batch)}, "
              f"overall fraction {np.mean(per_batch) / policy.batch_size:.3f}")


def show_filtering() -> None:
    # an LM that only knows the cycle 3 4 5 6
    cycle = [3, 4, 5, 6]
    corpus = [[cycle[(o + i) % 4] for i in range(n)] for n in range(2, 12) for o in range(4)] * 4
    lm = TransformerLM(LmConfig(10, n_layers=1, model_dim=16, n_heads=2), make_rng(0, "demo-lm"))
    train_lm(lm, corpus, steps=150, batch_size=16, seed=0)
    lm.eval()
    rng = make_rng(1, "demo-pool")
    pool = [corpus[int(i)] for i in rng.integers(len(corpus), size=19)] + [[9, 7, 8, 9, 7]]
    res = lm_filter(pool, lm, 0.4)
    print(f"filter 0.4: kept {len(res.kept)} of {len(pool)}; junk transcript kept? {19 in res.kept}")
    worst = np.argsort(res.normalized)[-3:][::-1]
    print("  worst normalized scores:", [(int(i), round(float(res.normalized[i]), 2)) for i in worst])


def show_balancing() -> None:
    rng = make_rng(2, "demo-balance")
    common = [rng.choice([0, 1], size=4).tolist() for _ in range(90)]
    rare = [rng.choice([2, 3], size=4).tolist() for _ in range(10)]
    res = balance(common + rare, np.full(4, 0.25), n_batches=400, pool_size=32)
    print(f"balance: KL {res.uniform_kl:.3f} -> {res.kl_trace[-1]:.4f} after {len(res.kl_trace) - 1} steps; "
          f"mean weight common {res.weights[:90].mean():.2f}, rare {res.weights[90:].mean():.2f}")


if __name__ == "__main__":
    show_mixing()
    show_filtering()
    show_balancing()
