"""Transducer checkpoints that carry enough metadata to rebuild the model."""

from __future__ import annotations

import dataclasses
import os
from typing import Mapping

from ..encoder import ProjectionBlockConfig, format_encoder_config, parse_encoder_config
from ..numcore import load_arrays, make_rng, save_checkpoint, split_groups
from .model import DecoderConfig, TransducerModel, build_transducer


def model_meta(model: TransducerModel) -> dict:
    return {"encoder": format_encoder_config(model.config),
            "projection": dataclasses.asdict(model.projection_config),
            "decoder": dataclasses.asdict(model.decoder_config)}


def save_transducer(path: str | os.PathLike, model: TransducerModel, meta: Mapping | None = None) -> None:
    """Parameters and buffers only (no optimizer state)."""
    save_checkpoint(path, model, meta={**model_meta(model), **(meta or {})})


def load_transducer(path: str | os.PathLike) -> tuple[TransducerModel, dict]:
    arrays, meta = load_arrays(path)
    model = build_transducer(parse_encoder_config(meta["encoder"]),
                             ProjectionBlockConfig(**meta["projection"]),
                             DecoderConfig(**meta["decoder"]), make_rng(0, "load"))
    groups = split_groups(arrays)
    params = dict(model.named_parameters())
    for k, v in groups["params"].items():
        params[k].data = v.copy()
    for k, b in model.named_buffers():
        b[...] = groups["buffers"][k]
    model.eval()
    return model, meta
