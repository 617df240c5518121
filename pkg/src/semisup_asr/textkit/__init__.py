"""Tokenizer, WER scoring and the fusion language model."""

from .lm import (
    FusionParams,
    LmConfig,
    LmError,
    LmState,
    TransformerLM,
    lm_loss,
    lm_score,
    lm_score_incremental,
    log_perplexity,
    train_lm,
)
from .tokenizer import TokenizerError, TokenizerModel, train_wpm
from .wer import corpus_wer, edit_distance, wer

__all__ = [
    "FusionParams",    "LmConfig", "LmError", "LmState", "TokenizerError", "TokenizerModel", "TransformerLM",
    "corpus_wer", "edit_distance", "lm_loss", "lm_score", "lm_score_incremental",
    "log_perplexity", "train_lm", "train_wpm", "wer",
]
