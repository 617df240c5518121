"""Conformer encoder family and its configuration."""

from .config import (
    DECODER_LAYERS,
    VARIANTS,
    ConfigError,
    EncoderConfig,
    ProjectionBlockConfig,
    format_encoder_config,
    load_encoder_config,
    parse_encoder_config,
    variant_config,
    variant_projection,
)
from .model import (
    PRETRAINABLE_PREFIXES,
    ConformerBlock,
    ConformerEncoder,
    ContextNetwork,
    ConvModule,
    EncoderError,
    ProjectionBlock,
    Subsampling,
    TransplantReport,
    build_encoder,
    checkpoint_transplant,
    lengths_to_mask,
    stack_frames,
    strided_length,
    unstack_frames,
)

__all__ = [name for name in dir() if not name.startswith("_")]
