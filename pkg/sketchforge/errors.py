"""
Exception hierarchy shared by every sketchforge module.
"""


class SketchForgeError(Exception):
    """Base class for all sketchforge failures."""


class ShapeError(SketchForgeError, ValueError):
    """An array extent or layout contract was violated."""


class ConfigError(SketchForgeError):
    """Bad configuration or command-line usage."""


class UnknownComponentError(SketchForgeError, KeyError):
    """A name (tap, gradient-check component, preset) is not registered."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NonFiniteError(SketchForgeError, FloatingPointError):
    """A NaN or infinity showed up where finite numbers are required."""


class TapeError(SketchForgeError, RuntimeError):
    """Reverse-mode differentiation was requested on an empty or foreign tape."""


class TrainingDiverged(SketchForgeError, RuntimeError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""


class FormatError(SketchForgeError):
    """A binary or text file does not follow its format."""


class MagicMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    def __init__(self, kind: str, found: int, expected: int):
        super().__init__(f"{kind} file version {found} is not supported (expected {expected})")
        self.kind = kind
        self.found = found
        self.expected = expected


class LayerShapeMismatchError(FormatError):
    def __init__(self, layer_index: int, found: tuple, expected: tuple):
        super().__init__(
            f"conv layer {layer_index}: stored shape {found} does not match expected {expected}"
        )
        self.layer_index = layer_index
        self.found = found
        self.expected = expected


class RangeError(SketchForgeError, ValueError):
    """Pixel values fall outside [0, 1]."""


class DanglingMatchError(SketchForgeError, IndexError):
    """A match index points past the end of the reference store."""


class AlignmentError(SketchForgeError, ValueError):
    """Landmarks do not determine a face alignment."""
