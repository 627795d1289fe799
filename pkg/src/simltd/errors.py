"""Exception hierarchy shared across the package."""


class SimLTDError(Exception):
    """Base class for all package errors."""


class DatasetError(SimLTDError):
    """Problems with dataset contents or construction."""


class MissingDatasetFileError(DatasetError, FileNotFoundError):
    """The annotation document (or an image payload) does not exist."""


class MalformedDatasetError(DatasetError):
    """The annotation document exists but cannot be interpreted."""


class DanglingReferenceError(DatasetError):
    """An annotation references an image id that does not resolve."""


class AugmentationError(SimLTDError):
    """Invalid input to an augmentation op (degenerate image, empty bank, ...)."""


class DetectorError(SimLTDError):
    """Shape/structure mismatches in the detector or its losses."""


class FreezePolicyError(DetectorError):
    """A freeze-policy prefix matched no parameter."""


class CheckpointError(SimLTDError):
    """A checkpoint document is missing keys or structurally inconsistent."""


class FusionError(SimLTDError):
    """Head/tail checkpoints cannot be fused (overlap, order, row counts)."""


class EvaluationError(SimLTDError):
    """Invalid evaluation input (unknown images, protocol mismatch, ...)."""


class ConfigError(SimLTDError):
    """A run configuration failed validation."""


class PipelineError(SimLTDError):
    """A stage was invoked with unusable inputs (empty dataset, bad handoff)."""
