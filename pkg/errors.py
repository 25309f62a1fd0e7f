"""
Exception hierarchy for the lesionseg desk pipeline
Library code raises these; only main.py turns them into exit codes.
"""


class LesionSegError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(LesionSegError):
    """Tensor shapes do not agree with what an operation needs"""


class InputError(LesionSegError):
    """Input values outside the documented domain (pixel range, thresholds, ...)"""


class NumericsError(LesionSegError):
    """A kernel produced NaN/Inf"""

    def __init__(self, op, detail=""):
        self.op = op
        message = f"non-finite values produced by '{op}'"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class TapeError(LesionSegError):
    """Misuse of the gradient tape (non-scalar loss, foreign loss, replay)"""


class VocabularyError(LesionSegError):
    pass


class ConfigError(LesionSegError):
    pass


class SynthDataError(LesionSegError):
    pass


class LossError(LesionSegError):
    """A loss term is non-finite; `term` names the offender"""

    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__(f"loss term '{term}' is not finite: {value!r}")


class MetricsError(LesionSegError):
    pass


class OptimizerError(LesionSegError):
    pass


class ExportError(LesionSegError):
    pass


class CheckpointError(LesionSegError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    def __init__(self, version, supported):
        self.version = version
        super().__init__(f"checkpoint format version {version} is not supported (expected {supported})")


class CheckpointShapeError(CheckpointError):
    pass


class TrainingDivergedError(LesionSegError):
    """Training hit a non-finite loss/gradient; the last good checkpoint is kept"""

    def __init__(self, message, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        if checkpoint_path:
            message += f" (last good checkpoint: {checkpoint_path})"
        super().__init__(message)
