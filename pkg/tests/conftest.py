import numpy as np
import pytest

from src.relunet import ModelConfig
from src.spectral import MultichannelWaveform, StftConfig

TINY_STFT = StftConfig(fft_length=128, hop_length=32, window_length=128)
TINY_SEGMENT_SECONDS = 0.05  # 800 samples -> 64 x 22 grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    values = dict(
        variant="relunet", num_channels=2, reference_index=0, encoder_widths=(2, 2, 3, 3, 3, 3),
        stft=TINY_STFT, segment_seconds=TINY_SEGMENT_SECONDS, seed=0,
    )
    values.update(overrides)
    return ModelConfig(**values)


def random_wave(rng, channels: int, length: int, sample_rate: int = 16000) -> MultichannelWaveform:
    return MultichannelWaveform(0.3 * rng.standard_normal((channels, length)), sample_rate)
