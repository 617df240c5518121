"""Log-mel features, long-audio segmentation, chunk sampling and adaptive SpecAugment."""

from __future__ import annotations

import json
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore.rng import make_rng


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16_000
    n_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    log_floor: float = 1e-10
    f_min: float = 0.0
    f_max: float | None = None

    def __post_init__(self):
        if self.n_mels < 1:
            raise FrontendError("n_mels must be >= 1")
        if self.hop_ms > self.window_ms:
            raise FrontendError("hop must not exceed window")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()


@dataclass
class FeatureSequence:
    """Time-major feature matrix; rows at and beyond ``valid_length`` are padding."""

    frames: np.ndarray
    valid_length: int
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise FrontendError("frames must be a T x n_mels matrix")
        if not 0 <= self.valid_length <= self.frames.shape[0]:
            raise FrontendError("valid_length must lie in [0, T]")
        if not np.all(np.isfinite(self.frames)):
            raise FrontendError("feature values must be finite")

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SpecAugmentPolicy:
    n_freq_masks: int = 2
    F: int = 27
    n_time_masks: int = 10
    p_S: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.p_S <= 1.0:
            raise FrontendError("p_S must lie in [0, 1]")
        if self.F < 0 or self.n_freq_masks < 0 or self.n_time_masks < 0:
            raise FrontendError("mask counts and sizes must be nonnegative")


@dataclass(frozen=True)
class SegmentationPolicy:
    """Durations in seconds."""

    min_len: float = 32.0
    max_len: float = 64.0
    chunk_len: float = 32.0

    def __post_init__(self):
        if not 0 < self.min_len <= self.max_len:
            raise FrontendError("need 0 < min_len <= max_len")
        if self.chunk_len > self.max_len:
            raise FrontendError("chunk_len must not exceed max_len")


@dataclass
class MaskSet:
    """Sampled mask spans plus the seed/stream that produced them.

    ``time_spans`` and ``freq_spans`` hold ``(start, width)`` pairs.
    """

    length: int
    time_spans: list[tuple[int, int]] = field(default_factory=list)
    freq_spans: list[tuple[int, int]] = field(default_factory=list)
    n_bins: int = 0
    seed: int | None = None
    stream: tuple = ()

    def time_mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        for s, w in self.time_spans:
            m[s:s + w] = True
        return m

    def freq_mask(self) -> np.ndarray:
        m = np.zeros(self.n_bins, dtype=bool)
        for s, w in self.freq_spans:
            m[s:s + w] = True
        return m

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.time_mask())


# -- log-mel -----------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_band_centers(config: FrontendConfig) -> np.ndarray:
    f_max = config.f_max or config.sample_rate / 2.0
    mels = np.linspace(hz_to_mel(config.f_min), hz_to_mel(f_max), config.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """Triangular filters of unit peak on the HTK mel scale, shape (n_fft//2+1, n_mels)."""
    f_max = config.f_max or config.sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(f_max), config.n_mels + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)).T


def num_frames(n_samples: int, config: FrontendConfig) -> int:
    if n_samples < config.win_length:
        return 1
    return (n_samples - config.win_length) // config.hop_length + 1


def log_mel(waveform: np.ndarray, config: FrontendConfig = FrontendConfig(), source_id: str = "") -> FeatureSequence:
    """Hann-windowed power spectrum through the mel filterbank, log-compressed.

    Inputs shorter than one window are zero-padded to a single frame.
    """
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise FrontendError("empty waveform")
    win, hop = config.win_length, config.hop_length
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    t = num_frames(x.size, config)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = x[idx] * np.hanning(win + 2)[1:-1]
    spec = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    mel = spec @ mel_filterbank(config)
    return FeatureSequence(np.log(np.maximum(mel, config.log_floor)), t, source_id)


def read_pcm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a single-channel 16-bit linear PCM WAV file as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise FrontendError(f"{path}: expected single-channel audio")
        if f.getsampwidth() != 2:
            raise FrontendError(f"{path}: expected 16-bit samples")
        rate = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32768.0, rate


def write_pcm(path: str | os.PathLike, waveform: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


# -- feature files -------------------------------------------------------------

_FEATURE_MAGIC = b"SSLFEAT1\n"


def write_features(path: str | os.PathLike, fs: FeatureSequence) -> None:
    """Header line (JSON: n_mels, T, valid_length, source_id) then float64 rows."""
    header = json.dumps({"n_mels": fs.n_mels, "T": len(fs), "valid_length": fs.valid_length,
                         "source_id": fs.source_id}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_FEATURE_MAGIC + header + b"\n")
        f.write(np.ascontiguousarray(fs.frames, dtype="<f8").tobytes())


def read_features(path: str | os.PathLike) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if not raw.startswith(_FEATURE_MAGIC):
        raise FrontendError(f"{path}: not a feature file")
    nl = raw.index(b"\n", len(_FEATURE_MAGIC))
    h = json.loads(raw[len(_FEATURE_MAGIC):nl])
    frames = np.frombuffer(raw, dtype="<f8", offset=nl + 1).reshape(h["T"], h["n_mels"])
    return FeatureSequence(frames.astype(np.float64), h["valid_length"], h["source_id"])


# -- segmentation ----------------------------------------------------------------

def random_segment(audio: np.ndarray, policy: SegmentationPolicy, seed: int, rate: float) -> list[np.ndarray]:
    """Cut ``audio`` (samples or frames along axis 0) into consecutive segments.

    Each cut takes a duration uniform in ``[min_len, max_len]`` seconds while
    more than ``max_len`` remains; the remainder becomes the last segment even
    when shorter than ``min_len``.
    """
    rng = make_rng(seed, "random_segment")
    lo = int(round(policy.min_len * rate))
    hi = int(round(policy.max_len * rate))
    n = len(audio)
    out = []
    start = 0
    while n - start > hi:
        d = int(rng.integers(lo, hi + 1))
        out.append(audio[start:start + d])
        start += d
    if start < n or not out:
        out.append(audio[start:])
    return out


def sample_chunk(segment: np.ndarray, chunk_len: float, seed: int, rate: float,
                 return_offset: bool = False):
    """A window of exactly ``chunk_len`` seconds at a uniform offset, or the whole segment if shorter."""
    if chunk_len <= 0:
        raise FrontendError("chunk_len must be positive")
    n = int(round(chunk_len * rate))
    if len(segment) <= n:
        return (segment, 0) if return_offset else segment
    start = int(make_rng(seed, "sample_chunk").integers(0, len(segment) - n + 1))
    chunk = segment[start:start + n]
    return (chunk, start) if return_offset else chunk


# -- SpecAugment -------------------------------------------------------------

def sample_spec_masks(n_mels: int, valid_length: int, policy: SpecAugmentPolicy, seed: int,
                      stream: tuple = ()) -> MaskSet:
    """Draw frequency and time masks for one utterance.

    Frequency widths are uniform on ``[0, F]``; time widths uniform on
    ``[0, floor(p_S * valid_length)]``; starts uniform over positions that keep
    the mask inside the valid region. Masks may overlap.
    """
    if policy.F > n_mels:
        raise FrontendError("F must not exceed n_mels")
    rng = make_rng(seed, "spec_augment", *stream)
    freq = []
    for _ in range(policy.n_freq_masks):
        w = int(rng.integers(0, policy.F + 1))
        freq.append((int(rng.integers(0, n_mels - w + 1)), w))
    max_t = int(np.floor(policy.p_S * valid_length))
    time = []
    for _ in range(policy.n_time_masks):
        w = int(rng.integers(0, max_t + 1))
        time.append((int(rng.integers(0, valid_length - w + 1)), w))
    return MaskSet(valid_length, time, freq, n_mels, seed, ("spec_augment",) + tuple(stream))


def apply_spec_masks(features: FeatureSequence, masks: MaskSet) -> FeatureSequence:
    out = features.frames.copy()
    fm = masks.freq_mask()
    out[:features.valid_length, fm] = 0.0
    tm = masks.time_mask()
    out[:masks.length][tm] = 0.0
    return FeatureSequence(out, features.valid_length, features.source_id)


def spec_augment(features: FeatureSequence, policy: SpecAugmentPolicy, seed: int,
                 stream: tuple = (), return_masks: bool = False):
    """Zero-fill sampled frequency and time masks inside the valid region."""
    masks = sample_spec_masks(features.n_mels, features.valid_length, policy, seed, stream)
    out = apply_spec_masks(features, masks)
    return (out, masks) if return_masks else out

