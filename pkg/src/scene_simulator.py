"""
Synthetic multichannel scene generator.

x_m = g_m * shift(s, n_m) + beta * nu_m with constant gains, integer sample delays
and per-channel noise scaled so the reference channel hits the requested SNR.
Datasets are seeded end to end and can be written out as WAV pairs plus a JSON
manifest.
"""

import os
import pathlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import config as cfg
from .config import atomic_write_json, load_json
from .errors import ConfigError, EmptyDatasetError, SilentInputError, UnreachableSnrError
from .log import get_logger, log_event
from .spectral import MultichannelWaveform, read_wav, write_wav

logger = get_logger(__name__)

NOISE_KINDS = ("white", "pink", "wav_file")
MAX_DELAY_FRACTION = 0.1
HEADROOM = 0.95


# ----------------------------
# Types
# ----------------------------
@dataclass(frozen=True, eq=False)
class Scene:
    clean: np.ndarray
    gains: Tuple[float, ...]
    delays: Tuple[int, ...]
    noise_kind: str = "white"
    snr_db: Optional[float] = None  # None or +inf: noiseless
    seed: int = 0
    reference_index: int = 0
    sample_rate: int = cfg.SAMPLE_RATE
    noise_path: Optional[str] = None
    coherent_fraction: float = 0.0

    def __post_init__(self):
        clean = np.array(self.clean, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))
        if len(self.gains) != len(self.delays) or not self.gains:
            raise ConfigError(f"need one gain and one delay per channel, got {len(self.gains)} and {len(self.delays)}")
        if any(d < 0 for d in self.delays):
            raise ConfigError(f"delays must be >= 0 samples, got {self.delays}")
        if max(self.delays) >= MAX_DELAY_FRACTION * len(clean):
            raise ConfigError(f"max delay {max(self.delays)} must stay below 10% of {len(clean)} samples")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")
        if self.noise_kind == "wav_file" and not self.noise_path:
            raise ConfigError("noise_kind 'wav_file' needs a noise_path")
        if not 0 <= self.reference_index < len(self.gains):
            raise ConfigError(f"reference_index {self.reference_index} out of range for {len(self.gains)} channels")
        if not 0.0 <= self.coherent_fraction < 1.0:
            raise ConfigError(f"coherent_fraction must be in [0, 1), got {self.coherent_fraction}")

    @property
    def num_channels(self) -> int:
        return len(self.gains)

    @property
    def noiseless(self) -> bool:
        return self.snr_db is None or np.isposinf(self.snr_db)


@dataclass(frozen=True, eq=False)
class SceneResult:
    mixture: MultichannelWaveform
    speech: np.ndarray  # (M, N) delayed, scaled clean per channel
    noise: np.ndarray  # (M, N) scaled noise per channel

    def reference_snr(self, reference_index: int) -> float:
        return 10.0 * np.log10(np.sum(self.speech[reference_index] ** 2) / np.sum(self.noise[reference_index] ** 2))


@dataclass(frozen=True)
class SimulateConfig:
    num_channels: int = cfg.NUM_CHANNELS
    reference_index: int = cfg.REFERENCE_INDEX
    sample_rate: int = cfg.SAMPLE_RATE
    segment_seconds: float = cfg.SEGMENT_SECONDS
    snr_range_db: Tuple[float, float] = cfg.SNR_RANGE_DB
    delay_range: Tuple[int, int] = cfg.DELAY_RANGE
    gain_range: Tuple[float, float] = cfg.GAIN_RANGE
    noise_kinds: Tuple[str, ...] = ("white", "pink")
    noise_paths: Tuple[str, ...] = ()
    procedural: bool = True
    coherent_fraction: float = 0.0
    lead_silence: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_channels < 1:
            raise ConfigError(f"num_channels must be >= 1, got {self.num_channels}")
        if not 0 <= self.reference_index < self.num_channels:
            raise ConfigError(
                f"reference_index {self.reference_index} out of range for {self.num_channels} channels"
            )
        for name in ("snr_range_db", "delay_range", "gain_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"{name} must be (low, high) with low <= high, got {(low, high)}")
        if min(self.delay_range) < 0:
            raise ConfigError(f"delay_range must be nonnegative, got {self.delay_range}")
        unknown = [k for k in self.noise_kinds if k not in NOISE_KINDS]
        if unknown or not self.noise_kinds:
            raise ConfigError(f"noise_kinds must be a nonempty subset of {NOISE_KINDS}, got {self.noise_kinds}")
        if "wav_file" in self.noise_kinds and not self.noise_paths:
            raise ConfigError("noise kind 'wav_file' needs noise_paths")
        if not 0.0 <= self.lead_silence < self.segment_seconds:
            raise ConfigError(f"lead_silence must be in [0, segment_seconds), got {self.lead_silence}")

    @property
    def segment_length(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))


@dataclass(frozen=True, eq=False)
class DatasetItem:
    noisy: MultichannelWaveform
    clean: np.ndarray  # reference-channel speech component
    scene: Scene
    item_id: str

    @property
    def condition(self) -> str:
        return self.scene.noise_kind


# ----------------------------
# Noise
# ----------------------------
def shift(signal: np.ndarray, delay: int) -> np.ndarray:
    """Delay by `delay` samples with zero fill, keeping the length"""
    if delay == 0:
        return signal.copy()
    return np.concatenate([np.zeros(delay), signal[: len(signal) - delay]])


def pink_noise(rng: np.random.Generator, channels: int, length: int) -> np.ndarray:
    """1/f power spectrum by spectral weighting of white noise, unit variance per channel"""
    spectrum = np.fft.rfft(rng.standard_normal((channels, length)), axis=1)
    weights = np.zeros(spectrum.shape[1])
    weights[1:] = 1.0 / np.sqrt(np.arange(1, spectrum.shape[1]))
    noise = np.fft.irfft(spectrum * weights, n=length, axis=1)
    return noise / np.maximum(noise.std(axis=1, keepdims=True), 1e-12)


def _file_noise(rng: np.random.Generator, path: str, channels: int, length: int) -> np.ndarray:
    source = read_wav(path).samples
    noise = np.zeros((channels, length))
    for m in range(channels):
        channel = source[m % source.shape[0]]
        reps = int(np.ceil((length + len(channel)) / len(channel)))
        tiled = np.tile(channel, reps)
        start = int(rng.integers(0, len(channel)))
        noise[m] = tiled[start:start + length]
    return noise


def draw_noise(rng: np.random.Generator, kind: str, channels: int, length: int, path: Optional[str] = None) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal((channels, length))
    if kind == "pink":
        return pink_noise(rng, channels, length)
    return _file_noise(rng, path, channels, length)


# ----------------------------
# Scenes
# ----------------------------
def simulate_scene(scene: Scene) -> SceneResult:
    """Realize one scene; deterministic in scene.seed"""
    s = scene.clean
    if not np.any(s):
        raise SilentInputError("clean source of the scene")
    length = len(s)
    speech = np.stack([g * shift(s, n) for g, n in zip(scene.gains, scene.delays)])

    if scene.noiseless:
        noise = np.zeros_like(speech)
        return SceneResult(MultichannelWaveform(speech, scene.sample_rate), speech, noise)

    rng = np.random.default_rng(scene.seed)
    nu = draw_noise(rng, scene.noise_kind, scene.num_channels, length, scene.noise_path)
    if scene.coherent_fraction > 0.0:
        shared = draw_noise(rng, scene.noise_kind, 1, length, scene.noise_path)
        nu = np.sqrt(1.0 - scene.coherent_fraction) * nu + np.sqrt(scene.coherent_fraction) * shared

    ref = scene.reference_index
    speech_energy = float(np.sum(speech[ref] ** 2))
    noise_energy = float(np.sum(nu[ref] ** 2))
    if speech_energy == 0.0:
        raise SilentInputError("reference channel speech component")
    if noise_energy == 0.0:
        raise UnreachableSnrError(f"noise is zero at the reference channel, cannot reach {scene.snr_db} dB")
    beta = np.sqrt(speech_energy / (noise_energy * 10.0 ** (scene.snr_db / 10.0)))
    noise = beta * nu
    return SceneResult(MultichannelWaveform(speech + noise, scene.sample_rate), speech, noise)


def procedural_source(rng: np.random.Generator, length: int, sample_rate: int = cfg.SAMPLE_RATE) -> np.ndarray:
    """Speech-like stand-in: 3-5 harmonics of a gliding f0 under a syllable-rate envelope"""
    t = np.arange(length) / sample_rate
    f0 = rng.uniform(100.0, 250.0) * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    source = np.zeros(length)
    for k in range(1, int(rng.integers(3, 6)) + 1):
        source += rng.uniform(0.5, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    envelope = 0.5 * (1.0 - np.cos(2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0, 2 * np.pi)))
    source *= envelope ** 1.5
    return 0.9 * source / np.max(np.abs(source))


def _pick_source(rng, clean_sources, template: SimulateConfig) -> np.ndarray:
    length = template.segment_length
    usable = [np.asarray(src, dtype=np.float64).reshape(-1) for src in clean_sources or []]
    usable = [src for src in usable if len(src) >= length and np.any(src)]
    if usable:
        src = usable[int(rng.integers(len(usable)))]
        start = int(rng.integers(0, len(src) - length + 1))
        clip = src[start:start + length].copy()
    elif template.procedural:
        clip = procedural_source(rng, length, template.sample_rate)
    else:
        raise EmptyDatasetError("no usable clean sources and procedural generation disabled")
    lead = int(round(template.lead_silence * template.sample_rate))
    clip[:lead] = 0.0
    return clip


def generate_dataset(
    clean_sources: Optional[Sequence[np.ndarray]],
    templates: Sequence[SimulateConfig],
    count: int,
    seed: int = 0,
) -> List[DatasetItem]:
    """Seeded noisy/clean segment pairs drawn from the scene templates

    SNRs are stratified over each template's range so the dataset mean tracks
    the range midpoint closely even for small counts.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if not templates:
        raise ConfigError("at least one scene template is required")
    if not clean_sources and not any(t.procedural for t in templates):
        raise EmptyDatasetError("no clean sources and procedural generation disabled")

    rng = np.random.default_rng(seed)
    strata = rng.permutation(count)
    item_seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    items = []
    for i in range(count):
        template = templates[int(rng.integers(len(templates)))]
        m = template.num_channels
        item_rng = np.random.default_rng(int(item_seeds[i]))
        clean = _pick_source(item_rng, clean_sources, template)

        low, high = template.snr_range_db
        snr = low + (strata[i] + item_rng.uniform()) / count * (high - low)
        delays = item_rng.integers(template.delay_range[0], template.delay_range[1] + 1, size=m)
        gains = item_rng.uniform(template.gain_range[0], template.gain_range[1], size=m)
        kind = template.noise_kinds[int(item_rng.integers(len(template.noise_kinds)))]
        noise_path = None
        if kind == "wav_file":
            noise_path = template.noise_paths[int(item_rng.integers(len(template.noise_paths)))]

        scene = Scene(
            clean=clean, gains=tuple(gains), delays=tuple(delays), noise_kind=kind, snr_db=float(snr),
            seed=int(item_seeds[i]), reference_index=template.reference_index,
            sample_rate=template.sample_rate, noise_path=noise_path,
            coherent_fraction=template.coherent_fraction,
        )
        result = simulate_scene(scene)
        peak = max(np.max(np.abs(result.mixture.samples)), np.max(np.abs(result.speech)))
        headroom = min(1.0, HEADROOM / peak)
        items.append(DatasetItem(
            noisy=MultichannelWaveform(result.mixture.samples * headroom, template.sample_rate),
            clean=result.speech[template.reference_index] * headroom,
            scene=scene,
            item_id=f"item_{i:04d}",
        ))
    log_event(logger, "dataset_generated", count=count, seed=seed, templates=len(templates))
    return items


# ----------------------------
# Manifest
# ----------------------------
def write_dataset(items: Sequence[DatasetItem], out_dir) -> pathlib.Path:
    """WAV pairs plus manifest.json with paths relative to the manifest"""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in items:
        noisy_name, clean_name = f"{item.item_id}_noisy.wav", f"{item.item_id}_clean.wav"
        write_wav(out_dir / noisy_name, item.noisy)
        write_wav(out_dir / clean_name, MultichannelWaveform(item.clean, item.noisy.sample_rate))
        entries.append({
            "item_id": item.item_id,
            "noisy_wav_path": noisy_name,
            "clean_wav_path": clean_name,
            "snr_db": round(float(item.scene.snr_db), 6),
            "delays": [int(d) for d in item.scene.delays],
            "gains": [round(float(g), 6) for g in item.scene.gains],
            "seed": int(item.scene.seed),
            "noise_kind": item.scene.noise_kind,
            "reference_index": item.scene.reference_index,
        })
    manifest = out_dir / "manifest.json"
    atomic_write_json(manifest, entries)
    log_event(logger, "manifest_written", path=str(manifest), items=len(entries))
    return manifest


@dataclass
class ManifestPair:
    noisy: MultichannelWaveform
    clean: np.ndarray
    entry: dict = field(default_factory=dict)

    @property
    def condition(self) -> str:
        return self.entry.get("noise_kind", "all")

    @property
    def item_id(self) -> str:
        return self.entry.get("item_id", "")


def load_manifest(path) -> List[dict]:
    entries = load_json(path)
    if not isinstance(entries, list):
        raise ConfigError(f"manifest {path} must be a JSON list")
    base = os.path.dirname(os.path.abspath(path))
    resolved = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"manifest entry {i} must be an object")
        entry = dict(entry)
        entry.setdefault("item_id", f"item_{i:04d}")
        for key in ("noisy_wav_path", "clean_wav_path", "estimate_wav_path", "reference_wav_path"):
            if key in entry:
                entry[key] = os.path.join(base, entry[key])
        resolved.append(entry)
    if not resolved:
        raise EmptyDatasetError(f"manifest {path} has no entries")
    return resolved


def load_pairs(path) -> List[ManifestPair]:
    pairs = []
    for entry in load_manifest(path):
        if "noisy_wav_path" not in entry or "clean_wav_path" not in entry:
            raise ConfigError(f"manifest entry {entry['item_id']} needs noisy_wav_path and clean_wav_path")
        clean = read_wav(entry["clean_wav_path"])
        pairs.append(ManifestPair(read_wav(entry["noisy_wav_path"]), clean.channel(0).copy(), entry))
    return pairs
