#!/usr/bin/env python3
"""
Command-line surface: simulate, train, enhance, beamform, evaluate, spectrogram, compare.

    python -m src.cli simulate --count 8 --seed 1 --out-dir data/toy
    python -m src.cli train --manifest data/toy/manifest.json --out models/relunet.ckpt
    python -m src.cli enhance --model models/relunet.ckpt --in noisy.wav --out enhanced.wav

Exit codes: 0 success, 2 usage/config error, 1 any other failure. Logs go to
stderr as `LEVEL key=value` lines; stdout carries only machine-readable results.
"""

import argparse
import dataclasses
import json
import logging
import pathlib
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from . import beamform, metrics, relunet, scene_simulator
from .config import atomic_write, atomic_write_csv, build_dataclass, load_json
from .errors import ConfigError, ToolkitError
from .log import get_logger, log_event, setup_logging
from .relunet import ModelConfig, TrainConfig
from .scene_simulator import SimulateConfig
from .spectral import MultichannelWaveform, StftConfig, read_wav, segment, stft, write_wav

logger = get_logger(__name__)

LOG_MAGNITUDE_FLOOR = 1e-10


# ----------------------------
# Run configuration
# ----------------------------
@dataclass(frozen=True)
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown section(s) in run config: {', '.join(unknown)}")
        stft_config = build_dataclass(StftConfig, data.get("stft", {}), "stft")
        if not isinstance(data.get("model", {}), dict):
            raise ConfigError("section 'model' must be an object")
        model_data = dict(data.get("model", {}))
        model_data.setdefault("stft", stft_config.to_dict())
        return cls(
            stft=stft_config,
            model=build_dataclass(ModelConfig, model_data, "model"),
            train=build_dataclass(TrainConfig, data.get("train", {}), "train"),
            simulate=build_dataclass(SimulateConfig, data.get("simulate", {}), "simulate"),
        )

    @classmethod
    def from_json(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(load_json(path))


def _emit(payload) -> None:
    """Machine-readable result line on stdout"""
    print(json.dumps(payload, sort_keys=True))


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _training_pairs(pairs, config: ModelConfig):
    """Cut manifest pairs into model-length segments (tail dropped)"""
    dataset = []
    for pair in pairs:
        noisy_segments = segment(pair.noisy, config.segment_seconds, "drop_tail", config.stft.window_length)
        clean_wave = MultichannelWaveform(pair.clean, pair.noisy.sample_rate)
        clean_segments = segment(clean_wave, config.segment_seconds, "drop_tail", config.stft.window_length)
        dataset.extend((n, c.channel(0)) for n, c in zip(noisy_segments, clean_segments))
    return dataset


# ----------------------------
# Commands
# ----------------------------
def cmd_simulate(args) -> int:
    run = RunConfig.from_json(args.config)
    sim = run.simulate
    if args.seed is not None:
        sim = dataclasses.replace(sim, seed=args.seed)
    sources = [read_wav(p).channel(0) for p in args.sources or []]
    items = scene_simulator.generate_dataset(sources, [sim], args.count, seed=sim.seed)
    manifest = scene_simulator.write_dataset(items, args.out_dir)
    _emit({"manifest": str(manifest), "items": len(items)})
    return 0


def cmd_train(args) -> int:
    run = RunConfig.from_json(args.config)
    model_config, train_config = run.model, run.train
    overrides = {
        k: v for k, v in (("variant", args.variant), ("bottleneck", args.bottleneck), ("seed", args.seed))
        if v is not None
    }
    if overrides:
        model_config = dataclasses.replace(model_config, **overrides)
    train_overrides = {
        k: v for k, v in (
            ("max_steps", args.steps), ("epochs", args.epochs),
            ("batch_size", args.batch_size), ("learning_rate", args.lr),
        ) if v is not None
    }
    if train_overrides:
        train_config = dataclasses.replace(train_config, **train_overrides)

    pairs = scene_simulator.load_pairs(args.manifest)
    dataset = _training_pairs(pairs, model_config)
    total, breakdown = relunet.count_parameters(model_config)
    log_event(logger, "model_built", variant=model_config.variant, parameters=total, **breakdown)

    result = relunet.train(dataset, model_config, train_config, show_progress=args.progress)
    relunet.save_checkpoint(args.out, result.params)
    history_path = args.history or f"{args.out}.history.csv"
    atomic_write_csv(history_path, result.history)
    _emit({
        "checkpoint": str(args.out), "history": str(history_path), "parameters": total,
        "best_step": result.best_step, "best_val_loss": result.best_val_loss,
    })
    return 0


def cmd_enhance(args) -> int:
    params = relunet.load_checkpoint(args.model)
    wave = read_wav(args.input)
    enhanced = relunet.enhance_waveform(wave, params, args.channel_policy)
    write_wav(args.out, MultichannelWaveform(enhanced, wave.sample_rate))
    log_event(logger, "enhanced", input=args.input, channels=wave.num_channels, seconds=wave.duration)
    _emit({"output": str(args.out), "samples": int(len(enhanced))})
    return 0


def cmd_beamform(args) -> int:
    run = RunConfig.from_json(args.config)
    wave = read_wav(args.input)
    delays = args.delays
    if delays is None:
        delays, curves = beamform.estimate_delays(wave, args.reference_index, args.max_lag)
        if args.curves:
            lags = np.arange(-args.max_lag, args.max_lag + 1)
            frame = pd.concat(
                [pd.DataFrame({"channel": m, "lag": lags, "value": curve}) for m, curve in sorted(curves.items())],
                ignore_index=True,
            ) if curves else pd.DataFrame(columns=["channel", "lag", "value"])
            atomic_write_csv(args.curves, frame)
    out = beamform.mvdr_enhance(
        wave, args.noise_prefix, gains=args.gains, delays=delays, reference_index=args.reference_index,
        config=run.stft, method=args.method, max_lag=args.max_lag,
    )
    write_wav(args.out, MultichannelWaveform(out, wave.sample_rate))
    _emit({"output": str(args.out), "delays": [int(d) for d in delays]})
    return 0


def _pair_condition(entry: dict) -> str:
    return entry.get("condition", entry.get("noise_kind", "all"))


def cmd_evaluate(args) -> int:
    selected = metrics.parse_metrics(args.metrics)
    entries = scene_simulator.load_manifest(args.pairs)
    pairs, labels, ids, rate = [], [], [], None
    for entry in entries:
        if "estimate_wav_path" in entry:
            estimate = read_wav(entry["estimate_wav_path"])
            reference = read_wav(entry["reference_wav_path"])
            channel = entry.get("channel", 0)
        else:
            estimate = read_wav(entry["noisy_wav_path"])
            reference = read_wav(entry["clean_wav_path"])
            channel = entry.get("reference_index", 0)
        pairs.append((estimate.channel(channel), reference.channel(0)))
        labels.append(_pair_condition(entry))
        ids.append(entry["item_id"])
        rate = estimate.sample_rate
    report = metrics.evaluate(pairs, labels, selected, rate, ids)
    report.write_csv(args.out)
    _emit({"report": str(args.out), **{m: report.mean(m) for m in selected}})
    return 0


def encode_pgm(image: np.ndarray) -> bytes:
    """8-bit binary PGM (P5); rows top to bottom"""
    height, width = image.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes()


def log_magnitude_image(log_magnitude: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 with the frequency axis bottom-up; flat input maps to zeros"""
    low, high = float(log_magnitude.min()), float(log_magnitude.max())
    if high - low <= 0.0:
        scaled = np.zeros_like(log_magnitude)
    else:
        scaled = np.round(255.0 * (log_magnitude - low) / (high - low))
    return scaled[::-1]


def cmd_spectrogram(args) -> int:
    run = RunConfig.from_json(args.config)
    wave = read_wav(args.input)
    if not 0 <= args.channel < wave.num_channels:
        raise ConfigError(f"--channel {args.channel} out of range for {wave.num_channels} channels")
    spec = stft(wave.channel(args.channel), run.stft)
    log_magnitude = 20.0 * np.log10(spec.magnitude() + LOG_MAGNITUDE_FLOOR)
    atomic_write(f"{args.out}.csv", pd.DataFrame(log_magnitude).to_csv(index=False, header=False))
    atomic_write(f"{args.out}.pgm", encode_pgm(log_magnitude_image(log_magnitude)))
    _emit({"csv": f"{args.out}.csv", "pgm": f"{args.out}.pgm", "bins": spec.shape[0], "frames": spec.shape[1]})
    return 0


def _score(estimate, reference, selected, sample_rate) -> dict:
    return {m: metrics.METRICS[m](estimate, reference, sample_rate) for m in selected}


def _subset_channels(wave: MultichannelWaveform, reference: int, count: int) -> MultichannelWaveform:
    """Reference first, then the lowest-indexed other channels"""
    others = [i for i in range(wave.num_channels) if i != reference]
    return wave.select([reference] + others[: count - 1])


def cmd_compare(args) -> int:
    run = RunConfig.from_json(args.config)
    selected = metrics.parse_metrics(args.metrics)
    pairs = scene_simulator.load_pairs(args.manifest)
    models = [(pathlib.Path(path).stem, relunet.load_checkpoint(path)) for path in args.models]
    for count in args.channel_counts or []:
        for name, params in models:
            if not 1 <= count <= params.config.num_channels:
                raise ConfigError(f"--channel-counts {count} outside 1..{params.config.num_channels} for model {name}")
    rows = []

    for pair in pairs:
        rate = pair.noisy.sample_rate
        reference = pair.entry.get("reference_index", run.model.reference_index)
        reference = min(reference, pair.noisy.num_channels - 1)
        base = {"item_id": pair.item_id, "condition": pair.condition, "channels": pair.noisy.num_channels}
        rows.append({"method": "noisy", **base, **_score(pair.noisy.channel(reference), pair.clean, selected, rate)})

        for name, params in models:
            enhanced = relunet.enhance_waveform(pair.noisy, params, args.channel_policy)
            rows.append({"method": name, **base, **_score(enhanced, pair.clean, selected, rate)})
            for count in args.channel_counts or []:
                if count > pair.noisy.num_channels:
                    raise ConfigError(
                        f"--channel-counts {count} exceeds the {pair.noisy.num_channels} channels of {pair.item_id}"
                    )
                subset = _subset_channels(pair.noisy, reference, count)
                padded = relunet.replicate_channels(
                    subset, params.config.num_channels, params.config.reference_index, input_reference=0
                )
                enhanced = relunet.enhance_waveform(padded, params)
                rows.append({
                    "method": f"{name}@{count}ch", **base, "channels": count,
                    **_score(enhanced, pair.clean, selected, rate),
                })

        delays = gains = None
        if "delays" in pair.entry:
            delays = [d - pair.entry["delays"][reference] for d in pair.entry["delays"]]
        if "gains" in pair.entry:
            gains = [g / pair.entry["gains"][reference] for g in pair.entry["gains"]]
        mvdr = beamform.mvdr_enhance(
            pair.noisy, args.noise_prefix, gains=gains, delays=delays, reference_index=reference, config=run.stft,
        )
        rows.append({"method": "mvdr", **base, **_score(mvdr, pair.clean, selected, rate)})
        log_event(logger, "compared", item=pair.item_id, methods=len(models) + 2)

    table = pd.DataFrame(rows).sort_values(["method", "item_id"], kind="stable").reset_index(drop=True)
    atomic_write_csv(args.out, table)
    summary = table.groupby("method")[list(selected)].mean()
    _emit({"table": str(args.out), "means": {m: summary.loc[m].to_dict() for m in summary.index}})
    return 0


# ----------------------------
# Parser
# ----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.cli", description="Multichannel speech enhancement toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic multichannel dataset")
    p.add_argument("--config")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--sources", nargs="*", help="clean WAV files; procedural speech-like sources otherwise")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a RelUNet / U-Net model")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--variant", choices=relunet.VARIANTS)
    p.add_argument("--bottleneck", choices=relunet.BOTTLENECKS)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--progress", action="store_true", help="show a progress bar on stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a multichannel WAV with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel-policy", choices=relunet.CHANNEL_POLICIES, default="strict")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("beamform", help="MVDR / delay-and-sum baseline")
    p.add_argument("--config")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-prefix", type=float, default=0.3, help="seconds of noise-only lead-in")
    p.add_argument("--delays", type=_int_list, help="per-channel delays in samples relative to the reference")
    p.add_argument("--gains", type=_float_list)
    p.add_argument("--reference-index", type=int, default=0)
    p.add_argument("--method", choices=("mvdr", "delay_and_sum"), default="mvdr")
    p.add_argument("--max-lag", type=int, default=beamform.DEFAULT_MAX_LAG)
    p.add_argument("--curves", help="CSV of GCC-PHAT curves (channel, lag, value)")
    p.set_defaults(func=cmd_beamform)

    p = sub.add_parser("evaluate", help="SI-SDR / STOI report over a pairs manifest")
    p.add_argument("--pairs", required=True)
    p.add_argument("--metrics", default="si_sdr,stoi")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("spectrogram", help="export a log-magnitude spectrogram as CSV + PGM")
    p.add_argument("--config")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--channel", type=int, default=0)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("compare", help="noisy vs models vs MVDR comparison table")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default="si_sdr,stoi")
    p.add_argument("--noise-prefix", type=float, default=0.3)
    p.add_argument("--channel-policy", choices=relunet.CHANNEL_POLICIES, default="strict")
    p.add_argument("--channel-counts", type=_int_list, help="also evaluate each model with only k channels")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except ConfigError as e:
        log_event(logger, "config_error", level=logging.ERROR, command=args.command, message=str(e))
        return 2
    except (ToolkitError, OSError) as e:
        log_event(logger, "failed", level=logging.ERROR, command=args.command, error=type(e).__name__, message=str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
