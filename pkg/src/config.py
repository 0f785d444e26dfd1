"""
Toolkit-wide defaults and the strict config/file helpers shared by every module.
"""

import dataclasses
import json
import os
import pathlib
import tempfile
from typing import Any, Dict, Type, TypeVar, Union, get_args, get_origin, get_type_hints

from .errors import ConfigError

# ----------------------------
# Signal defaults
# ----------------------------
SAMPLE_RATE = 16_000
FFT_LENGTH = 1024
HOP_LENGTH = 151
WINDOW_LENGTH = 1024
WINDOW = "hann"
DROP_LAST_BIN = True
SEGMENT_SECONDS = 1.2
WOLA_FLOOR = 1e-8

# ----------------------------
# Model defaults
# ----------------------------
ENCODER_WIDTHS = (16, 32, 64, 64, 64, 64)
KERNEL = (4, 3)
STRIDE = (2, 2)
PADDING = (1, 1)
GNN_LAYERS = 2
GAT_HEADS = 1
REFERENCE_INDEX = 4  # "channel 5"
NUM_CHANNELS = 6
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MAGNITUDE_EPS = 1e-12

# ----------------------------
# Training defaults
# ----------------------------
LEARNING_RATE = 1e-4
BATCH_SIZE = 32
EPOCHS = 100
VALIDATION_EVERY = 50
VAL_FRACTION = 0.25
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# ----------------------------
# Simulation defaults
# ----------------------------
SNR_RANGE_DB = (0.0, 10.0)
DELAY_RANGE = (0, 8)
GAIN_RANGE = (0.7, 1.0)

T = TypeVar("T")


def _matches(value: Any, hint: Any) -> bool:
    """Loose runtime check of a JSON value against a dataclass field annotation"""
    origin = get_origin(hint)
    if hint is Any:
        return True
    if origin is Union:
        return any(_matches(value, arg) for arg in get_args(hint))
    if hint is type(None):
        return value is None
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            return False
        args = [a for a in get_args(hint) if a is not Ellipsis]
        return all(_matches(v, args[0]) for v in value) if args else True
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is bool:
        return isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if dataclasses.is_dataclass(hint):
        return isinstance(value, (dict, hint))
    return True


def build_dataclass(cls: Type[T], data: Dict[str, Any], section: str) -> T:
    """Build `cls` from a JSON mapping, rejecting unknown keys and mistyped values"""
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")

    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = build_dataclass(hint, value, f"{section}.{name}")
        elif not _matches(value, hint):
            raise ConfigError(f"bad type for '{section}.{name}': {value!r}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}': {e}") from e


def load_json(path: Union[str, os.PathLike]) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e


def _current_umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path: Union[str, os.PathLike], data: Union[bytes, str]) -> pathlib.Path:
    """Write to a temporary sibling and rename over the target"""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        # mkstemp creates 0600; give the output the mode a plain open() would
        os.chmod(tmp, 0o666 & ~_current_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path: Union[str, os.PathLike], payload: Any) -> pathlib.Path:
    return atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def atomic_write_csv(path: Union[str, os.PathLike], frame) -> pathlib.Path:
    """Write a pandas DataFrame as CSV atomically"""
    return atomic_write(path, frame.to_csv(index=False))
