"""
RelUNet and plain U-Net speech enhancement models.

Each microphone channel is stacked with the reference channel (relunet) or fed
alone (unet), the channels are folded into the batch axis so one encoder weight
set serves every channel, an optional GCN/GAT bottleneck mixes the channel
embeddings, the decoder upsamples with skip connections, and a 1x1 convolution
over the concatenated channel features yields a complex T-F mask applied to the
reference channel.
"""

import copy
import logging
import sys
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import autodiff as ad
from . import config as cfg
from .autodiff import BatchNormState, Tensor
from .config import atomic_write_json, build_dataclass, load_json
from .errors import (
    ChannelCountMismatchError,
    CheckpointError,
    ConfigError,
    DivergenceError,
    EmptyDatasetError,
    InputTooSmallError,
    NonFiniteError,
    ShapeMismatchError,
    SilentInputError,
)
from .log import get_logger, log_event
from .spectral import (
    ComplexSpectrogram,
    MultichannelWaveform,
    StftConfig,
    hann_window,
    peak_normalize,
    segment,
    stft,
    window_square_sum,
)

logger = get_logger(__name__)

VARIANTS = ("unet", "relunet")
BOTTLENECKS = ("none", "gcn", "gat")
MASK_ACTIVATIONS = ("none", "selu")
CHANNEL_POLICIES = ("strict", "replicate")
DEPTH = 6
GAT_MASK_VALUE = -1e9


# ----------------------------
# Configuration
# ----------------------------
@dataclass(frozen=True)
class ModelConfig:
    variant: str = "relunet"
    bottleneck: str = "none"
    num_channels: int = cfg.NUM_CHANNELS
    encoder_widths: Tuple[int, ...] = cfg.ENCODER_WIDTHS
    kernel: Tuple[int, int] = cfg.KERNEL
    stride: Tuple[int, int] = cfg.STRIDE
    padding: Tuple[int, int] = cfg.PADDING
    gnn_layers: int = cfg.GNN_LAYERS
    gat_heads: int = cfg.GAT_HEADS
    reference_index: int = cfg.REFERENCE_INDEX
    mask_activation: str = "none"
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = cfg.SAMPLE_RATE
    segment_seconds: float = cfg.SEGMENT_SECONDS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.bottleneck not in BOTTLENECKS:
            raise ConfigError(f"bottleneck must be one of {BOTTLENECKS}, got {self.bottleneck!r}")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ConfigError(f"mask_activation must be one of {MASK_ACTIVATIONS}, got {self.mask_activation!r}")
        if len(self.encoder_widths) != DEPTH or min(self.encoder_widths) < 1:
            raise ConfigError(f"encoder_widths needs exactly {DEPTH} positive entries, got {self.encoder_widths}")
        if self.num_channels < 1:
            raise ConfigError(f"num_channels must be >= 1, got {self.num_channels}")
        if not 0 <= self.reference_index < self.num_channels:
            raise ConfigError(
                f"reference_index {self.reference_index} out of range for {self.num_channels} channels"
            )
        if self.gat_heads != 1:
            raise ConfigError("only a single attention head is supported")
        if self.gnn_layers < 1:
            raise ConfigError(f"gnn_layers must be >= 1, got {self.gnn_layers}")
        for name in ("encoder_widths", "kernel", "stride", "padding"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if isinstance(self.stft, dict):
            object.__setattr__(self, "stft", build_dataclass(StftConfig, self.stft, "model.stft"))

    @property
    def input_planes(self) -> int:
        return 4 if self.variant == "relunet" else 2

    @property
    def latent_width(self) -> int:
        return self.encoder_widths[-1]

    @property
    def segment_length(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    @property
    def spectrogram_shape(self) -> Tuple[int, int]:
        return self.stft.num_bins, self.stft.num_frames(self.segment_length)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "bottleneck": self.bottleneck,
            "num_channels": self.num_channels,
            "encoder_widths": list(self.encoder_widths),
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "gnn_layers": self.gnn_layers,
            "gat_heads": self.gat_heads,
            "reference_index": self.reference_index,
            "mask_activation": self.mask_activation,
            "seed": self.seed,
            "stft": self.stft.to_dict(),
            "sample_rate": self.sample_rate,
            "segment_seconds": self.segment_seconds,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return build_dataclass(cls, data, "model")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = cfg.EPOCHS
    batch_size: int = cfg.BATCH_SIZE
    learning_rate: float = cfg.LEARNING_RATE
    max_steps: Optional[int] = None
    validation_every: int = cfg.VALIDATION_EVERY
    val_fraction: float = cfg.VAL_FRACTION
    target_normalization: str = "mixture"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.validation_every < 1:
            raise ConfigError("batch_size, epochs and validation_every must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.target_normalization not in ("mixture", "own_peak"):
            raise ConfigError("target_normalization must be 'mixture' or 'own_peak'")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")


# ----------------------------
# Parameters
# ----------------------------
def size_ledger(config: ModelConfig, spatial: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Per-encoder-layer (H, W) after each strided convolution"""
    (kh, kw), (sh, sw), (ph, pw) = config.kernel, config.stride, config.padding
    h, w = spatial
    ledger = []
    for layer in range(1, DEPTH + 1):
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise InputTooSmallError(layer, (h, w))
        h = ad.conv_output_size(h, kh, sh, ph)
        w = ad.conv_output_size(w, kw, sw, pw)
        if h < 1 or w < 1:
            raise InputTooSmallError(layer, (h, w))
        ledger.append((h, w))
    return ledger


def decoder_widths(config: ModelConfig) -> List[int]:
    """Output width of each decoder block, mirroring the encoder and ending at d"""
    return list(reversed(config.encoder_widths[:-1])) + [config.latent_width]


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor; a pure function of the config"""
    kh, kw = config.kernel
    shapes: Dict[str, Tuple[int, ...]] = {}

    in_ch = config.input_planes
    for i, width in enumerate(config.encoder_widths):
        shapes[f"encoder.{i}.weight"] = (width, in_ch, kh, kw)
        shapes[f"encoder.{i}.bias"] = (width,)
        shapes[f"encoder.{i}.bn.gamma"] = (width,)
        shapes[f"encoder.{i}.bn.beta"] = (width,)
        in_ch = width

    if config.bottleneck != "none":
        ft, tt = size_ledger(config, config.spectrogram_shape)[-1]
        dim = config.latent_width * ft * tt
        for layer in range(config.gnn_layers):
            shapes[f"bottleneck.{layer}.weight"] = (dim, dim)
            if config.bottleneck == "gat":
                shapes[f"bottleneck.{layer}.attention"] = (2 * dim,)

    prev = config.latent_width
    for j, width in enumerate(decoder_widths(config)):
        c_in = prev + config.encoder_widths[DEPTH - 1 - j]
        shapes[f"decoder.{j}.weight"] = (c_in, width, kh, kw)
        shapes[f"decoder.{j}.bias"] = (width,)
        shapes[f"decoder.{j}.bn.gamma"] = (width,)
        shapes[f"decoder.{j}.bn.beta"] = (width,)
        prev = width

    shapes["head.weight"] = (2, config.num_channels * config.latent_width, 1, 1)
    shapes["head.bias"] = (2,)
    return shapes


def count_parameters(config: ModelConfig) -> Tuple[int, Dict[str, int]]:
    """Trainable element count (running stats excluded) with a per-component breakdown"""
    breakdown = {"encoder": 0, "bottleneck": 0, "decoder": 0, "head": 0}
    for name, shape in parameter_shapes(config).items():
        breakdown[name.split(".")[0]] += int(np.prod(shape))
    return sum(breakdown.values()), breakdown


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.startswith("decoder"):
        return shape[0] * shape[2] * shape[3]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, Tensor]
    bn_states: Dict[str, BatchNormState]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.tensors.items()}
        for prefix, state in self.bn_states.items():
            arrays[f"{prefix}.running_mean"] = state.running_mean
            arrays[f"{prefix}.running_var"] = state.running_var
        return arrays

    def snapshot(self) -> "ModelParams":
        tensors = {name: ad.parameter(t.data.copy(), name) for name, t in self.tensors.items()}
        return ModelParams(self.config, tensors, copy.deepcopy(self.bn_states))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def init_params(config: ModelConfig) -> ModelParams:
    """Fan-in scaled normal weights (gain 1), zero biases, gamma=1, beta=0; seeded"""
    rng = np.random.default_rng(config.seed)
    tensors: Dict[str, Tensor] = {}
    bn_states: Dict[str, BatchNormState] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bn.gamma"):
            data = np.ones(shape)
            bn_states[name[: -len(".gamma")]] = BatchNormState.fresh(shape[0])
        elif name.endswith((".bias", ".bn.beta")):
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) / np.sqrt(_fan_in(name, shape))
        tensors[name] = ad.parameter(data, name)
    return ModelParams(config, tensors, bn_states)


def save_checkpoint(path, params: ModelParams) -> None:
    """RUNT1 container plus `<path>.json` sidecar holding the ModelConfig"""
    ad.save_tensors(path, params.state_arrays())
    atomic_write_json(f"{path}.json", params.config.to_dict())


def load_checkpoint(path) -> ModelParams:
    config = ModelConfig.from_dict(load_json(f"{path}.json"))
    arrays = ad.load_tensors(path)
    template = init_params(config)
    expected = template.state_arrays()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"checkpoint names do not match config (missing={missing[:5]}, extra={extra[:5]})")
    for name, array in arrays.items():
        if array.shape != expected[name].shape:
            raise CheckpointError(f"{name}: stored shape {array.shape}, config expects {expected[name].shape}")
    tensors = {name: ad.parameter(arrays[name], name) for name in template.tensors}
    bn_states = {
        prefix: BatchNormState(arrays[f"{prefix}.running_mean"], arrays[f"{prefix}.running_var"])
        for prefix in template.bn_states
    }
    return ModelParams(config, tensors, bn_states)


# ----------------------------
# Types flowing through the network
# ----------------------------
@dataclass
class StackedInput:
    values: np.ndarray  # (M, 4, F, T) or (M, 2, F, T)


@dataclass
class Latent:
    values: Tensor  # (B*M, d, F~, T~)
    ledger: List[Tuple[int, int]]
    skips: List[Tensor] = field(default_factory=list)
    spatial: Tuple[int, int] = (0, 0)


@dataclass
class ComplexMask:
    real_part: np.ndarray  # (F, T)
    imag_part: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.real_part.shape


@dataclass
class ForwardResult:
    enhanced: np.ndarray  # (N,) de-normalized
    mask: ComplexMask
    enhanced_spec: ComplexSpectrogram
    scale: float


# ----------------------------
# Input representation
# ----------------------------
def stack_relative(
    spectrograms: Sequence[ComplexSpectrogram], reference_index: int, variant: str = "relunet"
) -> StackedInput:
    """Z_i = [Re X_i, Im X_i, Re X_r, Im X_r] for every channel i (unet: first two planes only)"""
    if not spectrograms:
        raise ShapeMismatchError("stack_relative needs at least one spectrogram")
    shape = spectrograms[0].shape
    for spec in spectrograms:
        if spec.shape != shape:
            raise ShapeMismatchError(f"stack_relative: spectrogram {spec.shape} differs from {shape}")
    if not 0 <= reference_index < len(spectrograms):
        raise ShapeMismatchError(f"reference_index {reference_index} out of range for {len(spectrograms)} channels")
    ref = spectrograms[reference_index]
    planes = []
    for spec in spectrograms:
        channel = [spec.real_part, spec.imag_part]
        if variant == "relunet":
            channel += [ref.real_part, ref.imag_part]
        planes.append(np.stack(channel))
    return StackedInput(np.stack(planes))


def replicate_channels(
    wave: MultichannelWaveform, num_channels: int, reference_index: int, input_reference: Optional[int] = None
) -> MultichannelWaveform:
    """Place the input reference at `reference_index`, other inputs in order, copies of the reference elsewhere"""
    if input_reference is None:
        input_reference = reference_index if reference_index < wave.num_channels else 0
    if wave.num_channels > num_channels:
        raise ChannelCountMismatchError(wave.num_channels, num_channels)
    ref = wave.channel(input_reference)
    others = [wave.channel(i) for i in range(wave.num_channels) if i != input_reference]
    slots = []
    for position in range(num_channels):
        if position == reference_index:
            slots.append(ref)
        elif others:
            slots.append(others.pop(0))
        else:
            slots.append(ref)
    return MultichannelWaveform(np.stack(slots), wave.sample_rate)


def check_sample_rate(wave: MultichannelWaveform, config: ModelConfig) -> None:
    if wave.sample_rate != config.sample_rate:
        raise ConfigError(f"input is sampled at {wave.sample_rate} Hz, model expects {config.sample_rate} Hz")


def prepare_channels(wave: MultichannelWaveform, config: ModelConfig, policy: str = "strict") -> MultichannelWaveform:
    check_sample_rate(wave, config)
    if policy not in CHANNEL_POLICIES:
        raise ConfigError(f"channel policy must be one of {CHANNEL_POLICIES}, got {policy!r}")
    if wave.num_channels == config.num_channels:
        return wave
    if policy == "strict" or wave.num_channels > config.num_channels:
        raise ChannelCountMismatchError(wave.num_channels, config.num_channels)
    return replicate_channels(wave, config.num_channels, config.reference_index)


# ----------------------------
# Network
# ----------------------------
def encoder_forward(z: Tensor, params: ModelParams, training: bool = False) -> Latent:
    """Six conv -> batch-norm -> SELU blocks over (B*M, planes, F, T); channels share weights"""
    config = params.config
    if z.ndim != 4 or z.shape[1] != config.input_planes:
        raise ShapeMismatchError(f"encoder expects (N, {config.input_planes}, F, T), got {z.shape}")
    ledger = size_ledger(config, z.shape[2:])
    skips = []
    x = z
    for i in range(DEPTH):
        x = ad.conv2d(
            x, params.tensors[f"encoder.{i}.weight"], params.tensors[f"encoder.{i}.bias"],
            config.stride, config.padding,
        )
        x = ad.batch_norm2d(
            x, params.tensors[f"encoder.{i}.bn.gamma"], params.tensors[f"encoder.{i}.bn.beta"],
            params.bn_states[f"encoder.{i}.bn"], training,
        )
        x = ad.selu(x)
        skips.append(x)
    return Latent(x, ledger, skips, tuple(z.shape[2:]))


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D~^-1/2 (A + I) D~^-1/2"""
    a_tilde = adjacency + np.eye(adjacency.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]


def _check_adjacency(adjacency: np.ndarray, nodes: int) -> None:
    if adjacency.shape != (nodes, nodes):
        raise ShapeMismatchError(f"adjacency {adjacency.shape} does not match {nodes} nodes")
    if np.any(adjacency < 0) or not np.array_equal(adjacency, adjacency.T):
        raise ConfigError("adjacency must be symmetric and nonnegative")


def gcn_layer(h: Tensor, adjacency: np.ndarray, weight: Tensor) -> Tensor:
    _check_adjacency(adjacency, h.shape[0])
    propagated = ad.matmul(normalized_adjacency(adjacency), h)
    return ad.selu(ad.matmul(propagated, weight))


def gat_layer(h: Tensor, adjacency: np.ndarray, weight: Tensor, attention: Tensor, return_attention: bool = False):
    """Single-head graph attention over the neighbourhood A + I"""
    nodes = h.shape[0]
    _check_adjacency(adjacency, nodes)
    wh = ad.matmul(h, weight)
    dim = wh.shape[1]
    if attention.shape != (2 * dim,):
        raise ShapeMismatchError(f"attention vector {attention.shape} does not match 2*{dim}")
    src = ad.matmul(wh, ad.reshape(ad.slice_axis(attention, 0, 0, dim), (dim, 1)))
    dst = ad.matmul(wh, ad.reshape(ad.slice_axis(attention, 0, dim, 2 * dim), (dim, 1)))
    ones_row, ones_col = np.ones((1, nodes)), np.ones((nodes, 1))
    scores = ad.add(ad.matmul(src, ones_row), ad.matmul(ones_col, ad.transpose(dst, (1, 0))))
    scores = ad.leaky_relu(scores, 0.2)
    neighbours = (adjacency + np.eye(nodes)) > 0
    scores = ad.add(scores, np.where(neighbours, 0.0, GAT_MASK_VALUE))
    alpha = ad.softmax(scores, axis=1)
    out = ad.selu(ad.matmul(alpha, wh))
    return (out, alpha) if return_attention else out


def bottleneck_forward(latent: Latent, params: ModelParams, batch_size: int = 1) -> Latent:
    """GCN/GAT over channel nodes with vec(zeta_i) features; identity when disabled"""
    config = params.config
    if config.bottleneck == "none":
        return latent
    values = latent.values
    nodes = values.shape[0] // batch_size
    dim = int(np.prod(values.shape[1:]))
    adjacency = np.ones((nodes, nodes)) - np.eye(nodes)
    flat = ad.reshape(values, (values.shape[0], dim))
    outputs = []
    for b in range(batch_size):
        h = ad.slice_axis(flat, 0, b * nodes, (b + 1) * nodes)
        for layer in range(config.gnn_layers):
            weight = params.tensors[f"bottleneck.{layer}.weight"]
            if config.bottleneck == "gcn":
                h = gcn_layer(h, adjacency, weight)
            else:
                h = gat_layer(h, adjacency, weight, params.tensors[f"bottleneck.{layer}.attention"])
        outputs.append(h)
    mixed = outputs[0] if batch_size == 1 else ad.concat(outputs, axis=0)
    return Latent(ad.reshape(mixed, values.shape), latent.ledger, latent.skips, latent.spatial)


def decoder_forward(latent: Latent, params: ModelParams, training: bool = False) -> Tensor:
    """Six conv-transpose -> batch-norm -> SELU blocks, each fed with the mirrored skip"""
    config = params.config
    if len(latent.skips) != DEPTH or len(latent.ledger) != DEPTH:
        raise ShapeMismatchError(f"decoder needs {DEPTH} skips and ledger entries")
    (kh, kw), (sh, sw), (ph, pw) = config.kernel, config.stride, config.padding
    targets = list(reversed(latent.ledger[:-1])) + [tuple(latent.spatial)]
    x = latent.values
    for j in range(DEPTH):
        skip = latent.skips[DEPTH - 1 - j]
        if skip.shape[2:] != x.shape[2:]:
            raise ShapeMismatchError(f"decoder block {j}: skip {skip.shape} does not match {x.shape}")
        x = ad.concat([x, skip], axis=1)
        h, w = x.shape[2:]
        out_pad = (
            targets[j][0] - ad.conv_transpose_output_size(h, kh, sh, ph, 0),
            targets[j][1] - ad.conv_transpose_output_size(w, kw, sw, pw, 0),
        )
        if not (0 <= out_pad[0] < sh and 0 <= out_pad[1] < sw):
            raise ShapeMismatchError(f"decoder block {j}: ledger target {targets[j]} unreachable from {(h, w)}")
        x = ad.conv_transpose2d(
            x, params.tensors[f"decoder.{j}.weight"], params.tensors[f"decoder.{j}.bias"],
            config.stride, config.padding, out_pad,
        )
        x = ad.batch_norm2d(
            x, params.tensors[f"decoder.{j}.bn.gamma"], params.tensors[f"decoder.{j}.bn.beta"],
            params.bn_states[f"decoder.{j}.bn"], training,
        )
        x = ad.selu(x)
    return x


def mask_head(decoder_out: Tensor, params: ModelParams) -> Tensor:
    """Concatenate channel features in order 0..M-1 and map to (B, 2, F, T) mask planes"""
    config = params.config
    weight = params.tensors["head.weight"]
    items, d, f, t = decoder_out.shape
    if d * config.num_channels != weight.shape[1]:
        raise ChannelCountMismatchError(config.num_channels, weight.shape[1] // max(d, 1))
    if items % config.num_channels:
        raise ShapeMismatchError(f"{items} channel items do not split into groups of {config.num_channels}")
    batch = items // config.num_channels
    stacked = ad.reshape(decoder_out, (batch, config.num_channels * d, f, t))
    mask = ad.conv2d(stacked, weight, params.tensors["head.bias"])
    if config.mask_activation == "selu":
        mask = ad.selu(mask)
    return mask


def apply_mask_planes(mask: Tensor, reference: Tensor) -> Tensor:
    """Complex product of (B, 2, F, T) plane pairs: [Re, Im] of X_ref * M"""
    if mask.shape != reference.shape:
        raise ShapeMismatchError(f"apply_mask: mask {mask.shape} vs reference {reference.shape}")
    m_re, m_im = ad.slice_axis(mask, 1, 0, 1), ad.slice_axis(mask, 1, 1, 2)
    x_re, x_im = ad.slice_axis(reference, 1, 0, 1), ad.slice_axis(reference, 1, 1, 2)
    real = ad.sub(ad.mul(x_re, m_re), ad.mul(x_im, m_im))
    imag = ad.add(ad.mul(x_re, m_im), ad.mul(x_im, m_re))
    return ad.concat([real, imag], axis=1)


def apply_mask(mask: ComplexMask, x_ref: ComplexSpectrogram) -> ComplexSpectrogram:
    if mask.shape != x_ref.shape:
        raise ShapeMismatchError(f"apply_mask: mask {mask.shape} vs reference {x_ref.shape}")
    real = x_ref.real_part * mask.real_part - x_ref.imag_part * mask.imag_part
    imag = x_ref.real_part * mask.imag_part + x_ref.imag_part * mask.real_part
    return ComplexSpectrogram(real, imag, x_ref.config, x_ref.original_length)


# ----------------------------
# Differentiable STFT / iSTFT
# ----------------------------
@lru_cache(maxsize=8)
def _analysis_matrices(config: StftConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(L, F) real/imag DFT matrices of the zero-padded frame"""
    n = np.arange(config.window_length)[:, None]
    k = np.arange(config.num_bins)[None, :]
    phase = 2.0 * np.pi * n * k / config.fft_length
    return np.cos(phase), -np.sin(phase)


@lru_cache(maxsize=8)
def _synthesis_matrices(config: StftConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(F, L) inverse real DFT matrices matching numpy.fft.irfft restricted to the window"""
    k = np.arange(config.num_bins)[:, None]
    n = np.arange(config.window_length)[None, :]
    weights = np.full((config.num_bins, 1), 2.0)
    weights[0] = 1.0
    if not config.drop_last_bin:
        weights[-1] = 1.0
    phase = 2.0 * np.pi * k * n / config.fft_length
    return weights * np.cos(phase) / config.fft_length, -weights * np.sin(phase) / config.fft_length


def _frame_indices(config: StftConfig, num_frames: int) -> np.ndarray:
    return np.arange(num_frames)[:, None] * config.hop_length + np.arange(config.window_length)[None, :]


def stft_magnitude(wave: Tensor, config: StftConfig, eps: float = cfg.MAGNITUDE_EPS) -> Tensor:
    """|STFT(wave)| as (F, T), sqrt(Re^2 + Im^2 + eps), differentiable"""
    num_frames = config.num_frames(wave.shape[0])
    idx = _frame_indices(config, num_frames)
    frames = ad.mul(ad.take(wave, idx), np.broadcast_to(hann_window(config.window_length), idx.shape))
    cos_m, sin_m = _analysis_matrices(config)
    real, imag = ad.matmul(frames, cos_m), ad.matmul(frames, sin_m)
    power = ad.add(ad.add(ad.square(real), ad.square(imag)), np.full(real.shape, eps))
    return ad.transpose(ad.sqrt(power), (1, 0))


def synthesize(spec_planes: Tensor, config: StftConfig, length: int) -> Tensor:
    """Differentiable weighted overlap-add of (2, F, T) planes into a length-`length` waveform"""
    _, num_bins, num_frames = spec_planes.shape
    if num_bins != config.num_bins:
        raise ShapeMismatchError(f"synthesize: {num_bins} bins, config expects {config.num_bins}")
    cos_m, sin_m = _synthesis_matrices(config)
    real = ad.transpose(ad.reshape(ad.slice_axis(spec_planes, 0, 0, 1), (num_bins, num_frames)), (1, 0))
    imag = ad.transpose(ad.reshape(ad.slice_axis(spec_planes, 0, 1, 2), (num_bins, num_frames)), (1, 0))
    frames = ad.add(ad.matmul(real, cos_m), ad.matmul(imag, sin_m))
    idx = _frame_indices(config, num_frames)
    frames = ad.mul(frames, np.broadcast_to(hann_window(config.window_length), idx.shape))
    total = (num_frames - 1) * config.hop_length + config.window_length
    out = ad.scatter_add(frames, idx, total)
    wsum = window_square_sum(config, num_frames)
    covered = wsum > cfg.WOLA_FLOOR
    out = ad.mul(out, np.where(covered, 1.0 / np.where(covered, wsum, 1.0), 0.0))
    if length <= total:
        return ad.slice_axis(out, 0, 0, length)
    return ad.concat([out, np.zeros(length - total)], axis=0)


def loss(estimate: Tensor, target, stft_config: StftConfig) -> Tensor:
    """2 * ||s_hat - s||_2 + || |STFT(s_hat)| - |STFT(s)| ||_2"""
    target = ad.as_tensor(target)
    if estimate.shape != target.shape:
        raise ShapeMismatchError(f"loss: estimate {estimate.shape} vs target {target.shape}")
    waveform_term = ad.l2_norm(ad.sub(estimate, target))
    spectral_term = ad.l2_norm(ad.sub(stft_magnitude(estimate, stft_config), stft_magnitude(target, stft_config)))
    return ad.add(ad.scale(waveform_term, 2.0), spectral_term)


# ----------------------------
# Forward pass
# ----------------------------
@dataclass
class _Prepared:
    """Per-segment constants: stacked input, reference planes, normalization scale"""
    stacked: np.ndarray
    reference: np.ndarray
    scale: float
    length: int


def _prepare(wave: MultichannelWaveform, config: ModelConfig) -> _Prepared:
    normalized, scale = peak_normalize(wave)
    specs = [stft(channel, config.stft) for channel in normalized.samples]
    stacked = stack_relative(specs, config.reference_index, config.variant)
    ref = specs[config.reference_index]
    return _Prepared(stacked.values, np.stack([ref.real_part, ref.imag_part]), scale, wave.num_samples)


def _network(batch: Sequence[_Prepared], params: ModelParams, training: bool) -> Tuple[Tensor, List[Tensor], Tensor]:
    """Mask planes (B, 2, F, T), per-item normalized waveforms and enhanced planes"""
    config = params.config
    z = Tensor(np.concatenate([item.stacked for item in batch]))
    latent = encoder_forward(z, params, training)
    latent = bottleneck_forward(latent, params, len(batch))
    mask = mask_head(decoder_forward(latent, params, training), params)
    enhanced_planes = apply_mask_planes(mask, Tensor(np.stack([item.reference for item in batch])))
    waves = []
    for b, item in enumerate(batch):
        planes = ad.reshape(ad.slice_axis(enhanced_planes, 0, b, b + 1), enhanced_planes.shape[1:])
        waves.append(synthesize(planes, config.stft, item.length))
    return mask, waves, enhanced_planes


def forward(
    wave: MultichannelWaveform,
    config: ModelConfig,
    params: ModelParams,
    mode: str = "eval",
    channel_policy: str = "strict",
) -> ForwardResult:
    """peak_normalize -> stft -> stack -> encoder -> bottleneck -> decoder -> head -> mask -> istft"""
    if config != params.config:
        raise ConfigError("forward: config does not match the parameter set")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    wave = prepare_channels(wave, config, channel_policy)
    item = _prepare(wave, config)
    with ad.no_grad():
        mask, waves, planes = _network([item], params, training=(mode == "train"))
    spec = ComplexSpectrogram(planes.data[0, 0].copy(), planes.data[0, 1].copy(), config.stft, item.length)
    return ForwardResult(
        enhanced=waves[0].data * item.scale,
        mask=ComplexMask(mask.data[0, 0].copy(), mask.data[0, 1].copy()),
        enhanced_spec=spec,
        scale=item.scale,
    )


def enhance_waveform(
    wave: MultichannelWaveform, params: ModelParams, channel_policy: str = "strict"
) -> np.ndarray:
    """Enhance an arbitrary-length recording segment by segment (zero-padded tail)"""
    config = params.config
    wave = prepare_channels(wave, config, channel_policy)
    pieces = []
    for chunk in segment(wave, config.segment_seconds, "pad_tail", config.stft.window_length):
        try:
            pieces.append(forward(chunk, config, params).enhanced)
        except SilentInputError:
            pieces.append(np.zeros(chunk.num_samples))
    if not pieces:
        return np.zeros(wave.num_samples)
    return np.concatenate(pieces)[: wave.num_samples]


# ----------------------------
# Training
# ----------------------------
@dataclass
class TrainResult:
    params: ModelParams
    history: pd.DataFrame  # step, train_loss, val_loss
    best_step: int
    best_val_loss: float


@dataclass
class _TrainItem:
    prepared: _Prepared
    target: np.ndarray


def _training_item(noisy: MultichannelWaveform, clean: np.ndarray, config: ModelConfig, target_norm: str) -> _TrainItem:
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    check_sample_rate(noisy, config)
    if noisy.num_channels != config.num_channels:
        raise ChannelCountMismatchError(noisy.num_channels, config.num_channels)
    if len(clean) != noisy.num_samples:
        raise ShapeMismatchError(f"clean target has {len(clean)} samples, mixture has {noisy.num_samples}")
    prepared = _prepare(noisy, config)
    if target_norm == "own_peak":
        peak = float(np.max(np.abs(clean)))
        target = clean / peak if peak > 0 else clean
    else:
        target = clean / prepared.scale
    return _TrainItem(prepared, target)


def batch_loss(items: Sequence[_TrainItem], params: ModelParams, training: bool) -> Tensor:
    """Mean per-item loss over a mini-batch"""
    _, waves, _ = _network([item.prepared for item in items], params, training)
    total = None
    for item, wave in zip(items, waves):
        item_loss = loss(wave, item.target, params.config.stft)
        total = item_loss if total is None else ad.add(total, item_loss)
    return ad.scale(total, 1.0 / len(items))


def _validation_loss(items: Sequence[_TrainItem], params: ModelParams, batch_size: int) -> float:
    with ad.no_grad():
        values = []
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            values.append(batch_loss(chunk, params, training=False).item() * len(chunk))
    return float(np.sum(values) / len(items))


def train(
    dataset: Sequence[Tuple[MultichannelWaveform, np.ndarray]],
    config: ModelConfig,
    train_config: Optional[TrainConfig] = None,
    validation: Optional[Sequence[Tuple[MultichannelWaveform, np.ndarray]]] = None,
    params: Optional[ModelParams] = None,
    show_progress: bool = False,
) -> TrainResult:
    """Mini-batch Adam training keeping the parameters with the best validation loss"""
    train_config = train_config or TrainConfig()
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    params = params or init_params(config)
    items = [_training_item(noisy, clean, config, train_config.target_normalization) for noisy, clean in dataset]
    rng = np.random.default_rng(config.seed + 1)

    if validation:
        val_items = [_training_item(n, c, config, train_config.target_normalization) for n, c in validation]
        train_items = items
    else:
        n_val = int(round(train_config.val_fraction * len(items)))
        if n_val and len(items) > 1:
            n_val = min(max(n_val, 1), len(items) - 1)
            order = rng.permutation(len(items))
            val_items = [items[i] for i in order[:n_val]]
            train_items = [items[i] for i in sorted(order[n_val:])]
        else:
            val_items, train_items = items, items

    batch_size = min(train_config.batch_size, len(train_items))
    steps_per_epoch = int(np.ceil(len(train_items) / batch_size))
    total_steps = train_config.max_steps or train_config.epochs * steps_per_epoch
    optimizer = ad.Adam(params.tensors, lr=train_config.learning_rate)

    log_event(
        logger, "train_start", variant=config.variant, bottleneck=config.bottleneck,
        train_items=len(train_items), val_items=len(val_items), steps=total_steps, batch_size=batch_size,
    )
    rows = []
    best_val, best_step, best = float("inf"), 0, params.snapshot()
    start_time = time.time()
    step = 0
    progress = tqdm(total=total_steps, disable=not show_progress, file=sys.stderr, desc="train")
    while step < total_steps:
        order = rng.permutation(len(train_items))
        for start in range(0, len(order), batch_size):
            if step >= total_steps:
                break
            step += 1
            batch = [train_items[i] for i in order[start:start + batch_size]]
            params.zero_grad()
            try:
                step_loss = batch_loss(batch, params, training=True)
                step_loss.backward()
                optimizer.step()
            except NonFiniteError as e:
                raise DivergenceError(step) from e
            train_loss = step_loss.item()
            if not np.isfinite(train_loss):
                raise DivergenceError(step, train_loss)

            val_loss = float("nan")
            if step == 1 or step % train_config.validation_every == 0 or step == total_steps:
                val_loss = _validation_loss(val_items, params, batch_size)
                if val_loss < best_val:
                    best_val, best_step, best = val_loss, step, params.snapshot()
            rows.append({"step": step, "train_loss": train_loss, "val_loss": val_loss})
            progress.update(1)

            if step <= 10 or step % train_config.validation_every == 0:
                elapsed = time.time() - start_time
                rate = step / elapsed if elapsed > 0 else 0.0
                eta = (total_steps - step) / rate if rate > 0 else 0.0
                log_event(
                    logger, "train_step", level=logging.DEBUG if step % train_config.validation_every else logging.INFO,
                    step=step, train_loss=train_loss, val_loss=val_loss, steps_per_s=rate, eta_s=eta,
                )
    progress.close()
    log_event(logger, "train_done", steps=total_steps, best_step=best_step, best_val_loss=best_val)
    history = pd.DataFrame(rows, columns=["step", "train_loss", "val_loss"])
    return TrainResult(best, history, best_step, best_val)
