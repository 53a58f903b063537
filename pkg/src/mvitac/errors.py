"""Exception types shared across the package.

Every failure mode has a dedicated class so callers (and the CLI exit-code
mapping) can distinguish configuration problems from runtime divergence.
"""


class MvitacError(Exception):
    """Base class for all package errors."""


class ShapeError(MvitacError):
    """Invalid tensor shape: empty, non-positive extent, or wrong rank."""


class ConformabilityError(MvitacError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: non-conforming shapes {self.shapes}")


class NoGraphError(MvitacError):
    """backward() called on a tensor with no recorded computation graph."""


class DegenerateEmbeddingError(MvitacError):
    """A row fed to l2 normalization has (near-)zero norm: collapsed embedding."""


class ProbeFailureError(MvitacError):
    """A finite-difference probe produced a non-finite function value."""


class InsufficientNegativesError(MvitacError):
    """Contrastive batch too small: at least one in-batch negative is required."""


class NormalizationContractError(MvitacError):
    """Embeddings passed to the contrastive loss are not unit-norm."""


class ConfigError(MvitacError):
    """Invalid configuration value (ranges, counts, incompatible settings)."""


class DatasetFormatError(MvitacError):
    """On-disk dataset layout is missing required files or is malformed."""


class LabelError(MvitacError):
    """A sample label falls outside the configured class count."""


class CheckpointError(MvitacError):
    """Base class for checkpoint read/write failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is damaged; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class UnsupportedVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class DivergedTrainingError(MvitacError):
    """Training produced a non-finite gradient or loss.

    ``param_name`` identifies the offending parameter when known;
    ``last_checkpoint`` points at the most recent good checkpoint, if any.
    """

    def __init__(self, message: str, param_name: str | None = None,
                 last_checkpoint: str | None = None):
        self.param_name = param_name
        self.last_checkpoint = last_checkpoint
        super().__init__(message)


class EvaluationError(MvitacError):
    """Evaluation requested on an empty or incompatible dataset."""
