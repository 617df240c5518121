"""Encoder and projection-block configurations, including the named model sizes."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    enc_dim: int
    n_heads: int
    conv_kernel: int
    relative_attention: bool = False
    time_reduction: int = 4
    variant: str = "custom"
    n_mels: int = 80
    ff_mult: int = 4
    sub_channels: tuple[int, int] | None = None
    max_rel: int = 64

    def __post_init__(self):
        if self.enc_dim % self.n_heads:
            raise ConfigError("enc_dim must be divisible by n_heads")
        if self.time_reduction not in (2, 4):
            raise ConfigError("time_reduction must be 2 or 4")
        if self.n_layers < 0 or self.conv_kernel < 1:
            raise ConfigError("n_layers >= 0 and conv_kernel >= 1 required")

    @property
    def subsampling_channels(self) -> tuple[int, int]:
        return self.sub_channels or (max(1, self.enc_dim // 4), self.enc_dim)


@dataclass(frozen=True)
class ProjectionBlockConfig:
    kind: str = "linear"
    out_dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "conformer_plus_stack"):
            raise ConfigError(f"unknown projection kind {self.kind!r}")


# Named sizes. The three large ones follow the published table; the toy ones
# are desk-scale stand-ins used by the generation schedule.
VARIANTS: dict[str, dict] = {
    "L": dict(n_layers=17, enc_dim=512, n_heads=8, conv_kernel=32, relative_attention=True),
    "XL": dict(n_layers=24, enc_dim=1024, n_heads=8, conv_kernel=5, relative_attention=False),
    "XXL": dict(n_layers=42, enc_dim=1024, n_heads=8, conv_kernel=5, relative_attention=False),
    "XXL+": dict(n_layers=42, enc_dim=1024, n_heads=8, conv_kernel=5, relative_attention=False),
    "toy-small": dict(n_layers=2, enc_dim=48, n_heads=4, conv_kernel=5, relative_attention=False,
                      ff_mult=2, sub_channels=(8, 16)),
    "toy-large": dict(n_layers=3, enc_dim=48, n_heads=4, conv_kernel=5, relative_attention=False,
                      ff_mult=2, sub_channels=(8, 16)),
    "toy-large+": dict(n_layers=3, enc_dim=48, n_heads=4, conv_kernel=5, relative_attention=False,
                       ff_mult=2, sub_channels=(8, 16)),
}

DECODER_LAYERS = {"L": 1, "XL": 2, "XXL": 2, "XXL+": 2}


def variant_config(name: str, **overrides) -> EncoderConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")
    return EncoderConfig(variant=name, **{**VARIANTS[name], **overrides})


def variant_projection(name: str, out_dim: int | None = None) -> ProjectionBlockConfig:
    kind = "conformer_plus_stack" if name.endswith("+") else "linear"
    return ProjectionBlockConfig(kind, out_dim)


def _parse_value(raw: str):
    v = raw.strip()
    low = v.lower()
    if low in ("true", "yes", "y"):
        return True
    if low in ("false", "no", "n"):
        return False
    if low.endswith("x") and low[:-1].isdigit():
        return int(low[:-1])
    if "," in v:
        return tuple(int(p) for p in v.split(","))
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def parse_encoder_config(text: str) -> EncoderConfig:
    """Parse ``key = value`` lines. ``variant = XL`` seeds the remaining fields."""
    fields: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split(sep, 1)
        fields[k.strip()] = _parse_value(v)
    known = {f.name for f in dataclasses.fields(EncoderConfig)}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
    variant = fields.pop("variant", "custom")
    if variant != "custom":
        return variant_config(str(variant), **fields)
    try:
        return EncoderConfig(**fields)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_encoder_config(path: str | os.PathLike) -> EncoderConfig:
    return parse_encoder_config(Path(path).read_text())


def format_encoder_config(cfg: EncoderConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
