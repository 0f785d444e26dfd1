"""
STFT / iSTFT front-end, waveform normalization, segmentation and WAV I/O.
Framing follows the training recipe: 1024-point FFT, hop 151, periodic Hann
window of 1024 samples, frames anchored at sample 0 (no centering), Nyquist
bin dropped.
"""

import dataclasses
import io
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from . import config as cfg
from .config import atomic_write
from .errors import (
    ConfigError,
    MalformedHeaderError,
    NonFiniteError,
    SegmentTooShortError,
    ShapeMismatchError,
    SignalTooShortError,
    SilentInputError,
    UnsupportedCodecError,
    WavIOError,
)

SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")


# ----------------------------
# Types
# ----------------------------
@dataclass(frozen=True)
class StftConfig:
    fft_length: int = cfg.FFT_LENGTH
    hop_length: int = cfg.HOP_LENGTH
    window_length: int = cfg.WINDOW_LENGTH
    window: str = cfg.WINDOW
    drop_last_bin: bool = cfg.DROP_LAST_BIN

    def __post_init__(self):
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}; only 'hann' is available")
        if self.fft_length < 2 or self.fft_length % 2:
            raise ConfigError(f"fft_length must be a positive even number, got {self.fft_length}")
        if not 1 <= self.window_length <= self.fft_length:
            raise ConfigError(f"window_length must be in [1, fft_length], got {self.window_length}")
        if self.hop_length < 1:
            raise ConfigError(f"hop_length must be >= 1, got {self.hop_length}")

    @property
    def num_bins(self) -> int:
        return self.fft_length // 2 + (0 if self.drop_last_bin else 1)

    def num_frames(self, length: int) -> int:
        if length < self.window_length:
            raise SignalTooShortError(length, self.window_length)
        return (length - self.window_length) // self.hop_length + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class MultichannelWaveform:
    samples: np.ndarray  # (M, N)
    sample_rate: int = cfg.SAMPLE_RATE

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ShapeMismatchError(f"waveform must be M x N with M, N >= 1, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]

    def select(self, indices) -> "MultichannelWaveform":
        return MultichannelWaveform(self.samples[list(indices)], self.sample_rate)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    real_part: np.ndarray  # (F, T)
    imag_part: np.ndarray  # (F, T)
    config: StftConfig = field(default_factory=StftConfig)
    original_length: int = 0

    def __post_init__(self):
        if np.shape(self.real_part) != np.shape(self.imag_part):
            raise ShapeMismatchError(
                f"real/imag parts differ: {np.shape(self.real_part)} vs {np.shape(self.imag_part)}"
            )

    @classmethod
    def from_complex(cls, values: np.ndarray, config: StftConfig, original_length: int) -> "ComplexSpectrogram":
        return cls(np.ascontiguousarray(values.real), np.ascontiguousarray(values.imag), config, original_length)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.real_part.shape

    def to_complex(self) -> np.ndarray:
        return self.real_part + 1j * self.imag_part

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real_part, self.imag_part)


# ----------------------------
# STFT / iSTFT
# ----------------------------
@lru_cache(maxsize=16)
def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window w[n] = 0.5 - 0.5 cos(2 pi n / L)"""
    window = get_window("hann", length, fftbins=True).astype(np.float64)
    window.setflags(write=False)
    return window


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite samples in {what}")


def frame_signal(wave: np.ndarray, config: StftConfig) -> np.ndarray:
    """Split into (T, window_length) frames starting at sample 0 with stride hop_length"""
    num_frames = config.num_frames(len(wave))
    frames = sliding_window_view(wave, config.window_length)[:: config.hop_length]
    return frames[:num_frames]


def stft(wave: np.ndarray, config: Optional[StftConfig] = None) -> ComplexSpectrogram:
    """Single-channel STFT -> F x T complex grid"""
    config = config or StftConfig()
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ShapeMismatchError(f"stft expects a single-channel vector, got shape {wave.shape}")
    _check_finite(wave, "stft input")
    frames = frame_signal(wave, config) * hann_window(config.window_length)
    bins = np.fft.rfft(frames, n=config.fft_length, axis=1)
    if config.drop_last_bin:
        bins = bins[:, :-1]
    return ComplexSpectrogram.from_complex(bins.T, config, len(wave))


def stft_multichannel(wave: MultichannelWaveform, config: Optional[StftConfig] = None) -> List[ComplexSpectrogram]:
    return [stft(channel, config) for channel in wave.samples]


def window_square_sum(config: StftConfig, num_frames: int) -> np.ndarray:
    """Overlap-added squared synthesis window over (T-1)*hop + L samples"""
    window = hann_window(config.window_length)
    total = (num_frames - 1) * config.hop_length + config.window_length
    wsum = np.zeros(total)
    for t in range(num_frames):
        start = t * config.hop_length
        wsum[start:start + config.window_length] += window ** 2
    return wsum


def istft(spec: ComplexSpectrogram, config: Optional[StftConfig] = None) -> np.ndarray:
    """Weighted overlap-add inverse of `stft`, truncated to the original length"""
    if config is not None and config != spec.config:
        raise ConfigError(f"synthesis config {config} does not match analysis config {spec.config}")
    config = spec.config
    num_bins, num_frames = spec.shape
    if num_bins != config.num_bins:
        raise ShapeMismatchError(f"spectrogram has {num_bins} bins, config expects {config.num_bins}")

    bins = spec.to_complex()
    if config.drop_last_bin:
        bins = np.vstack([bins, np.zeros((1, num_frames))])
    frames = np.fft.irfft(bins.T, n=config.fft_length, axis=1)[:, : config.window_length]
    frames = frames * hann_window(config.window_length)

    total = (num_frames - 1) * config.hop_length + config.window_length
    out = np.zeros(total)
    for t in range(num_frames):
        start = t * config.hop_length
        out[start:start + config.window_length] += frames[t]

    wsum = window_square_sum(config, num_frames)
    covered = wsum > cfg.WOLA_FLOOR
    out = np.where(covered, out / np.where(covered, wsum, 1.0), 0.0)

    length = spec.original_length or total
    if length <= total:
        return out[:length]
    return np.concatenate([out, np.zeros(length - total)])


# ----------------------------
# Normalization and segmentation
# ----------------------------
def peak_normalize(wave: MultichannelWaveform) -> Tuple[MultichannelWaveform, float]:
    """Divide every channel by the global peak; returns the scale for de-normalization"""
    peak = float(np.max(np.abs(wave.samples)))
    if peak == 0.0:
        raise SilentInputError("all channels are zero")
    return MultichannelWaveform(wave.samples / peak, wave.sample_rate), peak


def segment(
    wave: MultichannelWaveform,
    duration: float = cfg.SEGMENT_SECONDS,
    mode: str = "drop_tail",
    window_length: int = cfg.WINDOW_LENGTH,
) -> List[MultichannelWaveform]:
    """Consecutive non-overlapping segments; the partial tail is dropped or zero-padded"""
    if mode not in ("drop_tail", "pad_tail"):
        raise ConfigError(f"unknown segment mode {mode!r}")
    seg_len = int(round(duration * wave.sample_rate))
    if seg_len < window_length:
        raise SegmentTooShortError(
            f"segment of {duration}s = {seg_len} samples is shorter than the {window_length}-sample window"
        )

    segments = []
    n = wave.num_samples
    for start in range(0, n, seg_len):
        chunk = wave.samples[:, start:start + seg_len]
        if chunk.shape[1] < seg_len:
            if mode == "drop_tail":
                break
            chunk = np.pad(chunk, ((0, 0), (0, seg_len - chunk.shape[1])))
        segments.append(MultichannelWaveform(chunk, wave.sample_rate))
    return segments


# ----------------------------
# WAV I/O
# ----------------------------
def read_wav(path) -> MultichannelWaveform:
    """Read a PCM16 or float32 RIFF/WAVE file; PCM is scaled by 1/32768"""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise WavIOError(path, "no such file")
    try:
        info = sf.info(path)
    except sf.LibsndfileError as e:
        raise MalformedHeaderError(path, str(e)) from e
    except OSError as e:
        raise WavIOError(path, str(e)) from e
    if info.format != "WAV" or info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedCodecError(path, f"{info.format}/{info.subtype}")
    try:
        data, sample_rate = sf.read(path, dtype="float64", always_2d=True)
    except sf.LibsndfileError as e:
        raise MalformedHeaderError(path, str(e)) from e
    except OSError as e:
        raise WavIOError(path, str(e)) from e
    if data.shape[0] == 0:
        raise MalformedHeaderError(path, "no audio frames")
    return MultichannelWaveform(data.T, int(sample_rate))


def encode_wav(wave: MultichannelWaveform) -> bytes:
    """16-bit PCM WAV bytes with saturation clipping"""
    clipped = np.clip(wave.samples, -1.0, 32767.0 / 32768.0)
    buffer = io.BytesIO()
    sf.write(buffer, clipped.T, wave.sample_rate, subtype="PCM_16", format="WAV")
    return buffer.getvalue()


def write_wav(path, wave: MultichannelWaveform) -> None:
    path = os.fspath(path)
    try:
        atomic_write(path, encode_wav(wave))
    except OSError as e:
        raise WavIOError(path, str(e)) from e
