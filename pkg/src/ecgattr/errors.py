"""Exception hierarchy shared across the package."""


class EcgAttrError(Exception):
    """Base class; ``category`` becomes the CLI failure label."""

    category = "error"


class ConfigError(EcgAttrError, ValueError):
    category = "config"


class UsageError(EcgAttrError, RuntimeError):
    category = "usage"


class InputError(EcgAttrError, ValueError):
    category = "input"


class TrainingError(EcgAttrError, RuntimeError):
    category = "training"


class AttributionError(EcgAttrError, RuntimeError):
    category = "attribution"


class LoadError(EcgAttrError, IOError):
    category = "load"


class ManifestError(LoadError):
    """Manifest missing, unparsable, or structurally wrong."""


class BlobError(LoadError):
    """Binary blob missing or shorter than the manifest claims."""


class AnnotationError(LoadError):
    """Beat annotations violate the tiling/label invariants."""

    def __init__(self, message, beat_index=None):
        super().__init__(message)
        self.beat_index = beat_index


class StageError(EcgAttrError, RuntimeError):
    category = "stage"

    def __init__(self, stage, seed, cause):
        super().__init__(f"stage {stage!r} failed (seed={seed}): {cause}")
        self.stage = stage
        self.seed = seed
        self.cause = cause
