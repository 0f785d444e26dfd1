"""
Classical array processing baseline: cross-correlation, cross-spectral density,
GCC-PHAT time-delay estimation, steering vectors, noise covariance and the
MVDR / delay-and-sum beamformers.

TDOA sign convention: gcc_phat(x_i, x_r) is positive when x_i lags x_r, i.e.
x_i[n] = x_r[n - tau]. Estimated delays are therefore directly usable as the
per-channel steering delays relative to the reference channel.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve

from .errors import (
    ConfigError,
    DegenerateSpectrumError,
    NonFiniteError,
    ShapeMismatchError,
    SignalTooShortError,
)
from .log import get_logger, log_event
from .spectral import ComplexSpectrogram, MultichannelWaveform, StftConfig, istft, stft

logger = get_logger(__name__)

PHAT_FLOOR = 1e-12
DIAGONAL_LOADING = 1e-6
MVDR_DENOMINATOR_FLOOR = 1e-12
DEFAULT_MAX_LAG = 32


@dataclass(frozen=True, eq=False)
class SteeringVector:
    values: np.ndarray  # (F, M) complex

    @property
    def num_bins(self) -> int:
        return self.values.shape[0]

    def truncate(self, num_bins: int) -> "SteeringVector":
        return SteeringVector(self.values[:num_bins])


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    values: np.ndarray  # (F, M, M) complex, Hermitian per bin
    frame_count: int


def _check_pair(x1, x2) -> Tuple[np.ndarray, np.ndarray]:
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    if len(x1) != len(x2):
        raise ShapeMismatchError(f"signals differ in length: {len(x1)} vs {len(x2)}")
    return x1, x2


def _fft_size(length: int) -> int:
    """Smallest power of two holding a full linear correlation of two length-N signals"""
    return 1 << (2 * length - 2).bit_length()


# ----------------------------
# Correlation and spectra
# ----------------------------
def cross_correlation(x1, x2) -> Tuple[np.ndarray, np.ndarray]:
    """R(tau) = sum_t x1[t] x2[t + tau] for tau in [-(N-1), N-1]; returns (lags, values)"""
    x1, x2 = _check_pair(x1, x2)
    n = len(x1)
    values = np.correlate(x2, x1, mode="full")
    return np.arange(-(n - 1), n), values


def cross_spectral_density(x1, x2, fft_length: Optional[int] = None) -> np.ndarray:
    """S(f) = X1(f) X2(f)* on the zero-padded rfft grid"""
    x1, x2 = _check_pair(x1, x2)
    fft_length = fft_length or _fft_size(len(x1))
    return np.fft.rfft(x1, n=fft_length) * np.conj(np.fft.rfft(x2, n=fft_length))


def spectrum_from_correlation(lags: np.ndarray, values: np.ndarray, fft_length: int) -> np.ndarray:
    """Fourier pair of the correlation sequence matching `cross_spectral_density`'s conjugation

    With R defined as sum_t x1[t] x2[t + tau], the transform sum_tau R(tau) e^{+j 2 pi f tau / K}
    equals X1 X2* exactly, so the kernel carries the positive exponent.
    """
    if fft_length < len(values):
        raise ShapeMismatchError(f"fft_length {fft_length} cannot hold {len(values)} lags without aliasing")
    circular = np.zeros(fft_length)
    circular[np.mod(lags, fft_length)] = values
    return np.conj(np.fft.rfft(circular))


# ----------------------------
# GCC-PHAT
# ----------------------------
def gcc_phat(x_i, x_r, max_lag: int = DEFAULT_MAX_LAG) -> Tuple[int, np.ndarray, np.ndarray]:
    """TDOA of x_i relative to x_r in samples; returns (tau, lags, curve)"""
    x_i, x_r = _check_pair(x_i, x_r)
    n = len(x_i)
    if not 0 <= max_lag < n:
        raise ConfigError(f"max_lag must be in [0, {n}), got {max_lag}")
    if not np.any(x_i) or not np.any(x_r):
        raise DegenerateSpectrumError("all-zero input to gcc_phat")

    fft_length = _fft_size(n)
    cross = np.fft.rfft(x_i, n=fft_length) * np.conj(np.fft.rfft(x_r, n=fft_length))
    magnitude = np.abs(cross)
    if not np.any(magnitude > PHAT_FLOOR):
        raise DegenerateSpectrumError("cross spectrum vanishes at every bin")
    correlation = np.fft.irfft(cross / np.maximum(magnitude, PHAT_FLOOR), n=fft_length)

    lags = np.arange(-max_lag, max_lag + 1)
    curve = correlation[np.mod(lags, fft_length)]
    best = np.flatnonzero(curve == curve.max())
    tau = int(min(lags[best], key=lambda lag: (abs(lag), lag)))
    return tau, lags, curve


def estimate_delays(
    wave: MultichannelWaveform, reference_index: int = 0, max_lag: int = DEFAULT_MAX_LAG
) -> Tuple[List[int], Dict[int, np.ndarray]]:
    """Per-channel GCC-PHAT delays against the reference channel plus their curves"""
    reference = wave.channel(reference_index)
    delays, curves = [], {}
    for m in range(wave.num_channels):
        if m == reference_index:
            delays.append(0)
            continue
        tau, lags, curve = gcc_phat(wave.channel(m), reference, max_lag)
        delays.append(tau)
        curves[m] = curve
    log_event(logger, "tdoa_estimated", reference=reference_index, delays=delays)
    return delays, curves


# ----------------------------
# Steering and covariance
# ----------------------------
def steering_vector(gains: Sequence[float], delays: Sequence[float], sample_rate: float, fft_length: int) -> SteeringVector:
    """h(f)_m = G_m exp(-j 2 pi f fs tau_m / K) for bins f = 0..K/2; delays in seconds"""
    if fft_length < 2 or fft_length % 2:
        raise ConfigError(f"fft_length must be even and positive, got {fft_length}")
    gains = np.asarray(gains, dtype=np.float64)
    delays = np.asarray(delays, dtype=np.float64)
    if gains.shape != delays.shape or gains.ndim != 1:
        raise ShapeMismatchError(f"gains {gains.shape} and delays {delays.shape} must be equal-length vectors")
    bins = np.arange(fft_length // 2 + 1)[:, None]
    return SteeringVector(gains[None, :] * np.exp(-2j * np.pi * bins * sample_rate * delays[None, :] / fft_length))


def _stack(spectrograms: Sequence[ComplexSpectrogram]) -> np.ndarray:
    if not spectrograms:
        raise ShapeMismatchError("no spectrograms given")
    shape = spectrograms[0].shape
    if any(s.shape != shape for s in spectrograms):
        raise ShapeMismatchError("spectrograms differ in shape")
    return np.stack([s.to_complex() for s in spectrograms])  # (M, F, T)


def estimate_noise_covariance(spectrograms: Sequence[ComplexSpectrogram], noise_frames) -> NoiseCovariance:
    """Sample covariance over the noise frames plus 1e-6 * tr(R) / M diagonal loading"""
    frames = np.asarray(list(noise_frames), dtype=np.int64)
    if frames.size == 0:
        raise ShapeMismatchError("empty noise frame set")
    x = _stack(spectrograms)[:, :, frames]
    num_channels = x.shape[0]
    if frames.size < num_channels:
        log_event(logger, "covariance_rank_deficient", frames=int(frames.size), channels=num_channels)
    r = np.einsum("mft,nft->fmn", x, np.conj(x)) / frames.size
    r = 0.5 * (r + np.conj(np.transpose(r, (0, 2, 1))))
    trace = np.real(np.trace(r, axis1=1, axis2=2))
    r = r + (DIAGONAL_LOADING * trace / num_channels)[:, None, None] * np.eye(num_channels)[None]
    return NoiseCovariance(r, int(frames.size))


# ----------------------------
# Beamformer weights
# ----------------------------
def mvdr_weights(noise: NoiseCovariance, steering: SteeringVector) -> np.ndarray:
    """w(f) = R^-1 h / (h^H R^-1 h) via a per-bin Hermitian solve"""
    r = noise.values
    h = steering.values
    if h.shape[0] < r.shape[0] or h.shape[1] != r.shape[1]:
        raise ShapeMismatchError(f"steering {h.shape} incompatible with covariance {r.shape}")
    h = h[: r.shape[0]]
    weights = np.zeros_like(h)
    for f in range(r.shape[0]):
        try:
            r_inv_h = solve(r[f], h[f], assume_a="her")
        except np.linalg.LinAlgError as e:
            raise NonFiniteError(f"MVDR solve failed at bin {f}: {e}") from e
        denominator = np.real(np.vdot(h[f], r_inv_h))
        w = r_inv_h / max(denominator, MVDR_DENOMINATOR_FLOOR)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError(f"non-finite MVDR weights at bin {f}")
        weights[f] = w
    return weights


def delay_and_sum_weights(steering: SteeringVector) -> np.ndarray:
    """w(f) = h / ||h||^2 (distortionless matched filter)"""
    h = steering.values
    return h / np.maximum(np.sum(np.abs(h) ** 2, axis=1, keepdims=True), MVDR_DENOMINATOR_FLOOR)


def apply_weights(weights: np.ndarray, spectrograms: Sequence[ComplexSpectrogram]) -> ComplexSpectrogram:
    """Y(f, t) = w(f)^H x(f, t)"""
    x = _stack(spectrograms)
    if weights.shape != (x.shape[1], x.shape[0]):
        raise ShapeMismatchError(f"weights {weights.shape} vs spectrogram stack {x.shape}")
    y = np.einsum("fm,mft->ft", np.conj(weights), x)
    first = spectrograms[0]
    return ComplexSpectrogram.from_complex(y, first.config, first.original_length)


# ----------------------------
# Pipeline
# ----------------------------
def mvdr_enhance(
    wave: MultichannelWaveform,
    noise_prefix: float = 0.3,
    gains: Optional[Sequence[float]] = None,
    delays: Optional[Sequence[int]] = None,
    reference_index: int = 0,
    config: Optional[StftConfig] = None,
    method: str = "mvdr",
    max_lag: int = DEFAULT_MAX_LAG,
) -> np.ndarray:
    """STFT -> noise covariance from the leading noise-only frames -> steering -> w^H x -> iSTFT

    `delays` are integer samples relative to the reference channel (positive = lags);
    when omitted they are estimated with GCC-PHAT. `method="delay_and_sum"` swaps the
    MVDR weights for h / ||h||^2.
    """
    config = config or StftConfig()
    if method not in ("mvdr", "delay_and_sum"):
        raise ConfigError(f"method must be 'mvdr' or 'delay_and_sum', got {method!r}")
    num_channels = wave.num_channels
    if not 0 <= reference_index < num_channels:
        raise ConfigError(f"reference_index {reference_index} out of range for {num_channels} channels")

    if delays is None:
        delays, _ = estimate_delays(wave, reference_index, max_lag)
    if gains is None:
        gains = np.ones(num_channels)
    if len(delays) != num_channels or len(gains) != num_channels:
        raise ShapeMismatchError(f"need {num_channels} gains and delays, got {len(gains)} and {len(delays)}")

    spectrograms = [stft(channel, config) for channel in wave.samples]
    prefix_samples = int(round(noise_prefix * wave.sample_rate))
    if prefix_samples < config.window_length:
        raise SignalTooShortError(prefix_samples, config.window_length)
    prefix_frames = min(config.num_frames(prefix_samples), spectrograms[0].shape[1])
    if prefix_frames < num_channels:
        raise ConfigError(f"noise prefix covers {prefix_frames} frames, need at least {num_channels}")

    steering = steering_vector(
        gains, np.asarray(delays, dtype=np.float64) / wave.sample_rate, wave.sample_rate, config.fft_length
    ).truncate(config.num_bins)
    if method == "mvdr":
        noise = estimate_noise_covariance(spectrograms, range(prefix_frames))
        weights = mvdr_weights(noise, steering)
    else:
        weights = delay_and_sum_weights(steering)
    log_event(
        logger, "beamform", method=method, channels=num_channels, noise_frames=prefix_frames,
        delays=[int(d) for d in delays],
    )
    return istft(apply_weights(weights, spectrograms))
