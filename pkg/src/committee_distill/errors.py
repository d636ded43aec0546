"""Exception hierarchy shared across the toolkit."""


class DistillError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DistillError):
    """Config file failed to parse or validate."""


class UnknownArchitecture(DistillError):
    """Requested arch_id is not in the registry."""


class ShapeError(DistillError):
    """Tensor shape or resolution incompatible with the operation."""


class NoNormalizationLayers(DistillError):
    """Model contains no batch-normalization layers."""


class EmptyBatch(DistillError):
    """Operation requires a nonempty batch."""


class EmptyDataset(DistillError):
    """Operation requires a nonempty dataset."""


class LabelError(DistillError):
    """Dataset label outside [0, num_classes)."""


class TrainingDiverged(DistillError):
    """Training loss became non-finite."""


class IncompleteCommittee(DistillError):
    """A committee member required for the operation is missing."""


class MissingPrior(DistillError):
    """No prior-performance entry for the requested architecture."""


class InvalidSubsetSize(DistillError):
    """Committee subset size N outside [2, committee size]."""


class InvalidScore(DistillError):
    """Prior-performance score is non-finite."""


class InvalidMomentum(DistillError):
    """Running-statistics momentum outside [0, 1]."""


class InsufficientData(DistillError):
    """Not enough source images per class for the requested initialization."""


class SynthesisDiverged(DistillError):
    """Recovery loss became non-finite."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateNormalization(DistillError):
    """Batch statistics would be epsilon-only (one element per channel)."""


class DegenerateBatch(DistillError):
    """Batch too small for the augmentation (CutMix needs >= 2 samples)."""


class RangeError(DistillError):
    """Scalar argument outside its documented range."""


class InsufficientSamples(DistillError):
    """Diversity metrics need at least two samples per class."""


class AlignmentError(DistillError):
    """Training traces are empty or not aligned on epochs."""


class IncompleteLog(DistillError):
    """Run log lacks the timing marks needed for the probe."""


class DependencyError(DistillError):
    """Upstream stage artifact missing."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class UnknownPreset(DistillError):
    """Ablation preset name not recognized."""
