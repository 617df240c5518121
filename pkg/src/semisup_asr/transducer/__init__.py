"""RNN-T transducer: prediction/joint networks, loss, decoding and fine-tuning."""

from .io import load_transducer, model_meta, save_transducer
from .loss import LatticeScores, lattice_scores, rnnt_loss
from .model import (
    BLANK_ID,
    Decoder,
    DecoderConfig,
    JointNetwork,
    PredictionNetwork,
    TransducerError,
    TransducerModel,
    build_transducer,
)
from .search import (
    DECODE_FIELDS,
    FusionTuning,
    Hypothesis,
    PrefixCache,
    beam_search,
    decode_record,
    decode_utterance,
    fused_score,
    greedy_decode,
    read_decode_manifest,
    tune_fusion,
    write_decode_manifest,
)
from .train import (
    FinetuneConfig,
    NonFiniteLoss,
    finetune_step,
    load_ema,
    make_optimizers,
    pad_features,
    pad_labels,
    train_transducer,
)

__all__ = [name for name in dir() if not name.startswith("_")]
