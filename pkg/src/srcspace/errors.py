"""Exception types shared across the package."""


class SrcSpaceError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(SrcSpaceError, ValueError):
    """A configuration value is outside its allowed range or set."""


class InvalidInputError(SrcSpaceError, ValueError):
    """Input data has the wrong shape, content or amount."""


class EmptyResultError(SrcSpaceError):
    """An operation had nothing to work on (e.g. no usable epochs)."""


class UndefinedMetricError(SrcSpaceError, ValueError):
    """A metric is undefined for the given labels."""


class CorruptCacheError(SrcSpaceError):
    """A cached tensor failed its integrity checks."""


class LeakageError(SrcSpaceError):
    """A split plan places the same session or subject in two splits."""


class NonFiniteLossError(SrcSpaceError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, layer=None, history=None):
        super().__init__(message)
        self.layer = layer
        self.history = history


class RegionSkipped(SrcSpaceError):
    """A region was rejected for masking (too few voxels on this grid)."""

    def __init__(self, region_id, n_voxels, minimum):
        super().__init__(f"region {region_id} has {n_voxels} voxels (< {minimum}); skipped")
        self.region_id = region_id
        self.n_voxels = n_voxels
        self.minimum = minimum


class CrossDatasetUnsupported(SrcSpaceError):
    """Structured refusal for cross-dataset evaluation of fixed-domain sensor models."""

    def __init__(self, model_name, source_dataset, target_dataset, reason):
        super().__init__(f"{model_name}: {reason}")
        self.model_name = model_name
        self.source_dataset = source_dataset
        self.target_dataset = target_dataset
        self.reason = reason

    def as_record(self):
        return {
            "status": "refused",
            "model": self.model_name,
            "trained_on": self.source_dataset,
            "evaluated_on": self.target_dataset,
            "reason": self.reason,
        }
