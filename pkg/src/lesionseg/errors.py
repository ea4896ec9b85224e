"""Exception types shared across the package."""


class LesionSegError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(LesionSegError):
    """Tensor shapes, channel counts or label dims do not fit the operation."""


class GeometryError(LesionSegError):
    """Requested spatial geometry is impossible (empty output, oversize window)."""


class DegenerateBatchError(LesionSegError):
    """Batch statistics requested over fewer than two elements per channel."""


class InvalidLabelError(LesionSegError):
    """Label map contains values outside {0, 1}."""


class InvalidMaskError(LesionSegError):
    """Mask contains values outside the allowed binary set."""


class CodecError(LesionSegError):
    """NetPBM stream is malformed; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RecordError(LesionSegError):
    """Packed record file is corrupt or self-inconsistent."""


class CheckpointError(LesionSegError):
    """Checkpoint file is corrupt (bad magic, truncation, garbage fields)."""


class IncompatibleModelError(LesionSegError):
    """Checkpoint tensors do not match the model layout they are loaded into."""


class TrainingDivergedError(LesionSegError):
    """Loss became non-finite; `step` is the last step that was still finite."""

    def __init__(self, step: int):
        super().__init__(f"training diverged: non-finite loss at step {step}")
        self.step = step


class EmptyInputError(LesionSegError):
    """An aggregate was requested over zero values."""
