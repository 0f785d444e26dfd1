import numpy as np
import pytest
import soundfile as sf

from src.errors import (
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
from src.spectral import (
    ComplexSpectrogram,
    MultichannelWaveform,
    StftConfig,
    hann_window,
    istft,
    peak_normalize,
    read_wav,
    segment,
    stft,
    write_wav,
)


def test_default_grid_shape_and_zero_input():
    spec = stft(np.zeros(19200))
    assert spec.shape == (512, 121)
    assert not np.any(spec.real_part) and not np.any(spec.imag_part)


@pytest.mark.parametrize("length", [1024, 1025, 1174, 1175, 5000, 19200])
def test_frame_count_formula(length):
    config = StftConfig()
    assert stft(np.ones(length)).shape[1] == (length - 1024) // 151 + 1 == config.num_frames(length)


def test_cosine_energy_concentrated_in_main_lobe():
    n = np.arange(19200)
    spec = stft(np.cos(2 * np.pi * 8 * n / 1024))
    power = spec.magnitude() ** 2
    frame = power[:, 10]
    assert frame[7:10].sum() / frame.sum() >= 0.99


def test_periodic_hann():
    window = hann_window(1024)
    n = np.arange(1024)
    np.testing.assert_allclose(window, 0.5 - 0.5 * np.cos(2 * np.pi * n / 1024), atol=1e-15)


def test_short_and_non_finite_input():
    with pytest.raises(SignalTooShortError, match="signal too short"):
        stft(np.zeros(1000))
    bad = np.zeros(2048)
    bad[10] = np.nan
    with pytest.raises(NonFiniteError):
        stft(bad)


def _band_limited(rng, n: int = 19200) -> np.ndarray:
    t = np.arange(n)
    freqs = rng.uniform(0.01, 0.25, 12)
    phases = rng.uniform(0, 2 * np.pi, 12)
    return np.sum(np.cos(2 * np.pi * freqs[:, None] * t + phases[:, None]), axis=0) / 12


def test_round_trip_interior(rng):
    for _ in range(5):
        x = _band_limited(rng)
        y = istft(stft(x))
        assert len(y) == 19200
        assert np.max(np.abs(y[1024:19200 - 1024] - x[1024:19200 - 1024])) <= 1e-6


def test_round_trip_full_band_keeps_nyquist(rng):
    config = StftConfig(drop_last_bin=False)
    for _ in range(5):
        x = rng.standard_normal(19200)
        y = istft(stft(x, config))
        assert np.max(np.abs(y[1024:19200 - 1024] - x[1024:19200 - 1024])) <= 1e-10


def test_istft_zero_and_linearity(rng):
    spec = stft(rng.standard_normal(4000))
    zero = ComplexSpectrogram(np.zeros(spec.shape), np.zeros(spec.shape), spec.config, 4000)
    assert not np.any(istft(zero))
    doubled = ComplexSpectrogram(2 * spec.real_part, 2 * spec.imag_part, spec.config, 4000)
    np.testing.assert_allclose(istft(doubled), 2 * istft(spec), atol=1e-12)


def test_istft_config_mismatch(rng):
    spec = stft(rng.standard_normal(4000))
    with pytest.raises(ConfigError):
        istft(spec, StftConfig(hop_length=128))


def test_stft_linearity(rng):
    x, y = rng.standard_normal(6000), rng.standard_normal(6000)
    lhs = stft(2.5 * x - 0.5 * y).to_complex()
    rhs = 2.5 * stft(x).to_complex() - 0.5 * stft(y).to_complex()
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(rhs))


def test_parseval_per_frame(rng):
    config = StftConfig(drop_last_bin=False)
    x = rng.standard_normal(3000)
    spec = stft(x, config)
    windowed = x[:1024] * hann_window(1024)
    bins = spec.to_complex()[:, 0]
    full = np.sum(np.abs(bins) ** 2) * 2 - np.abs(bins[0]) ** 2 - np.abs(bins[-1]) ** 2
    assert full / 1024 == pytest.approx(np.sum(windowed ** 2), rel=1e-9)


def test_peak_normalize_examples():
    wave, scale = peak_normalize(MultichannelWaveform(np.array([[0.5, 0.0], [-2.0, 1.0]])))
    np.testing.assert_array_equal(wave.samples, [[0.25, 0.0], [-1.0, 0.5]])
    assert scale == 2.0

    single, scale = peak_normalize(MultichannelWaveform(np.array([0.1])))
    np.testing.assert_allclose(single.samples, [[1.0]])
    assert scale == 0.1

    with pytest.raises(SilentInputError, match="silent input"):
        peak_normalize(MultichannelWaveform(np.zeros((2, 10))))


def test_segment_policies():
    wave = MultichannelWaveform(np.ones((2, 38400)))
    assert [s.num_samples for s in segment(wave, 1.2, "drop_tail")] == [19200, 19200]

    wave = MultichannelWaveform(np.ones((1, 20800)))
    assert len(segment(wave, 1.2, "drop_tail")) == 1
    padded = segment(wave, 1.2, "pad_tail")
    assert len(padded) == 2
    assert np.count_nonzero(padded[1].samples == 0) == 17600

    short = MultichannelWaveform(np.ones((1, 8000)))
    assert segment(short, 1.2, "drop_tail") == []
    assert len(segment(short, 1.2, "pad_tail")) == 1

    with pytest.raises(SegmentTooShortError):
        segment(short, 0.01)


def test_waveform_invariants():
    with pytest.raises(ShapeMismatchError):
        MultichannelWaveform(np.zeros((2, 0)))
    source = np.zeros((2, 4))
    MultichannelWaveform(source)
    source[0, 0] = 1.0  # caller's array stays writable


def test_wav_round_trip(tmp_path, rng):
    wave = MultichannelWaveform(rng.uniform(-0.9, 0.9, (3, 4000)), 16000)
    path = tmp_path / "x.wav"
    write_wav(path, wave)
    back = read_wav(path)
    assert back.num_channels == 3 and back.num_samples == 4000 and back.sample_rate == 16000
    assert np.max(np.abs(back.samples - wave.samples)) <= 1.0 / 32768


def test_wav_saturates(tmp_path):
    path = tmp_path / "loud.wav"
    write_wav(path, MultichannelWaveform(np.array([[2.0, -2.0, 0.0]])))
    back = read_wav(path)
    np.testing.assert_allclose(back.samples, [[32767 / 32768, -1.0, 0.0]])


def test_handmade_stereo_file(tmp_path):
    frames = np.array([[1000, -1000], [2000, -2000], [0, 32767]], dtype="<i2")
    data = frames.tobytes()
    header = b"RIFF" + (36 + len(data)).to_bytes(4, "little") + b"WAVE"
    header += b"fmt " + (16).to_bytes(4, "little") + (1).to_bytes(2, "little") + (2).to_bytes(2, "little")
    header += (16000).to_bytes(4, "little") + (16000 * 4).to_bytes(4, "little")
    header += (4).to_bytes(2, "little") + (16).to_bytes(2, "little")
    header += b"data" + len(data).to_bytes(4, "little")
    path = tmp_path / "stereo.wav"
    path.write_bytes(header + data)

    wave = read_wav(path)
    assert wave.num_channels == 2 and wave.num_samples == 3 and wave.sample_rate == 16000
    np.testing.assert_allclose(wave.samples, frames.T / 32768.0)


def test_wav_errors(tmp_path, rng):
    with pytest.raises(WavIOError):
        read_wav(tmp_path / "missing.wav")

    good = tmp_path / "good.wav"
    write_wav(good, MultichannelWaveform(rng.uniform(-0.5, 0.5, (1, 2000))))
    truncated = tmp_path / "truncated.wav"
    truncated.write_bytes(good.read_bytes()[:20])
    with pytest.raises(MalformedHeaderError, match="malformed header"):
        read_wav(truncated)

    pcm24 = tmp_path / "pcm24.wav"
    sf.write(pcm24, np.zeros(100), 16000, subtype="PCM_24")
    with pytest.raises(UnsupportedCodecError):
        read_wav(pcm24)
