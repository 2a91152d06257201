"""Exception types raised across the pipeline."""


class GliomaMTLError(Exception):
    """Base class for all package errors."""


class VocabularyError(GliomaMTLError, ValueError):
    """A label string is not part of an output's fixed vocabulary."""

    def __init__(self, output, value):
        self.output = output
        self.value = value
        super().__init__(f"unrecognized {output} category {value!r}")


class IngestionError(GliomaMTLError):
    """Raised when a case directory cannot be loaded."""


class PreprocessError(GliomaMTLError, ValueError):
    pass


class AugmentError(GliomaMTLError, ValueError):
    pass


class BuildError(GliomaMTLError, ValueError):
    """The network specification cannot be turned into a model."""


class InferenceError(GliomaMTLError, ValueError):
    pass


class ConfigError(GliomaMTLError, ValueError):
    pass


class UndefinedMetricError(GliomaMTLError, ValueError):
    """The metric has no defined value for the given inputs."""


class NonFiniteLossError(GliomaMTLError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, output, batch, value):
        self.output = output
        self.batch = batch
        self.value = value
        super().__init__(
            f"non-finite {output} loss ({value}) at virtual batch {batch}")
