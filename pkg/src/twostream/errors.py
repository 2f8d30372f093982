"""Exception hierarchy shared across the pipeline."""


class TwoStreamError(Exception):
    """Base class for all package errors."""


class DataError(TwoStreamError):
    """Bad or missing input data (maps to CLI exit code 2)."""


class IngestError(DataError):
    pass


class EmptyInputError(IngestError):
    pass


class ManifestError(DataError):
    pass


class FormatError(DataError):
    """A binary or text artifact does not match its documented layout."""


class DependencyError(DataError):
    """An upstream artifact is missing; names the command that produces it."""

    def __init__(self, artifact, producer):
        super().__init__(f"missing {artifact}; run `{producer}` first")
        self.artifact = artifact
        self.producer = producer


class ConfigError(TwoStreamError):
    pass


class StreamConfigError(ConfigError):
    pass


class ParameterError(ConfigError):
    pass


class TrainingError(TwoStreamError):
    pass


class FusionError(TwoStreamError):
    pass


class EvaluationError(TwoStreamError):
    pass


class StageError(TwoStreamError):
    """Wraps a failure inside run_experiment with the stage and sample that failed."""

    def __init__(self, stage, sample, cause):
        super().__init__(f"stage {stage!r} failed on sample {sample!r}: {cause}")
        self.stage = stage
        self.sample = sample
        self.cause = cause
