"""
Error hierarchy for the toolkit.
Every distinct failure the pipeline can report has its own class so callers
(and the CLI exit-code mapping) can tell them apart without parsing messages.
"""

from typing import Optional


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(ToolkitError, ValueError):
    """Invalid configuration value, unknown key or bad JSON"""


class ShapeMismatchError(ToolkitError, ValueError):
    """Operands with incompatible dimensions"""


class NonFiniteError(ToolkitError, ValueError):
    """NaN or Inf found where finite values are required"""


class SignalTooShortError(ToolkitError, ValueError):
    def __init__(self, length: int, needed: int):
        super().__init__(f"signal too short: {length} samples, need at least {needed}")
        self.length = length
        self.needed = needed


class SilentInputError(ToolkitError, ValueError):
    def __init__(self, detail: str = ""):
        super().__init__("silent input" + (f": {detail}" if detail else ""))


class SegmentTooShortError(ToolkitError, ValueError):
    """Segment duration does not cover one STFT window"""


# ----------------------------
# WAV file errors
# ----------------------------
class WavError(ToolkitError):
    """Base class for WAV read/write failures"""


class MalformedHeaderError(WavError, ValueError):
    def __init__(self, path: str, detail: str = ""):
        super().__init__(f"malformed header in {path}" + (f": {detail}" if detail else ""))
        self.path = path


class UnsupportedCodecError(WavError, ValueError):
    def __init__(self, path: str, subtype: str):
        super().__init__(f"unsupported codec {subtype!r} in {path} (PCM_16 or FLOAT only)")
        self.path = path
        self.subtype = subtype


class WavIOError(WavError, OSError):
    def __init__(self, path: str, detail: str = ""):
        super().__init__(f"I/O failure on {path}" + (f": {detail}" if detail else ""))
        self.path = path


# ----------------------------
# Array processing / model errors
# ----------------------------
class DegenerateSpectrumError(ToolkitError, ValueError):
    def __init__(self, detail: str = ""):
        super().__init__("degenerate spectrum" + (f": {detail}" if detail else ""))


class ChannelCountMismatchError(ToolkitError, ValueError):
    def __init__(self, got: int, expected: int):
        super().__init__(f"channel count mismatch: input has {got} channels, model was trained on {expected}")
        self.got = got
        self.expected = expected


class InputTooSmallError(ToolkitError, ValueError):
    def __init__(self, layer: int, size: tuple):
        super().__init__(f"input too small for depth 6: spatial size {size} collapses at encoder layer {layer}")
        self.layer = layer
        self.size = size


class DivergenceError(ToolkitError, RuntimeError):
    def __init__(self, step: int, loss: Optional[float] = None):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class EmptyDatasetError(ToolkitError, ValueError):
    """Dataset or source list has no items"""


class UnreachableSnrError(ToolkitError, ValueError):
    """Requested SNR cannot be realized with the requested noise"""


class CheckpointError(ToolkitError, ValueError):
    """Parameter container is truncated, has a bad magic or mismatching names"""


class GraphError(ToolkitError, RuntimeError):
    """backward() called on a value that recorded no graph"""
