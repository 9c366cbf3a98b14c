"""Exception and warning types shared across the pipeline."""


class TriageError(Exception):
    """Base class for all wildtriage errors."""


class DataError(TriageError):
    """Bad input data: manifests, annotations, splits, taxonomies."""


class ManifestError(DataError):
    pass


class AnnotationError(DataError):
    pass


class TaxonomyError(DataError):
    pass


class SplitError(DataError):
    pass


class ConfigurationError(TriageError):
    """Invalid pipeline, backend, or experiment configuration."""


class StageError(TriageError):
    """A pipeline stage failed; carries backend diagnostics in the message."""


class ProtocolError(StageError):
    """An external backend violated the line-delimited wire protocol."""


class UnsupportedOverrideError(TriageError):
    """A what-if override needs data the stored run never captured."""


class TriageWarning(UserWarning):
    """Base class for wildtriage warnings."""


class CoordinateClampWarning(TriageWarning):
    """Annotation coordinates fell outside the image and were clamped."""


class SamplingExhaustedWarning(TriageWarning):
    """Rejection sampling hit its retry budget before filling the request."""


class PartialBurstWarning(TriageWarning):
    """Fixed-count burst grouping left a trailing burst short of the target."""
