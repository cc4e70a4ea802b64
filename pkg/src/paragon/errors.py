"""Error taxonomy shared across the pipeline.

Every stage raises a subclass of ParagonError so the CLI can map failures
to a categorized message and a nonzero exit code.
"""


class ParagonError(Exception):
    """Base class for all pipeline errors."""


class ParseError(ParagonError):
    """A dataset file line failed to parse."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SchemaError(ParagonError):
    """Input violated a declared schema (e.g. category id out of range)."""


class SplitError(ParagonError):
    """Leave-one-out splitting is impossible for some user."""


class SamplingError(ParagonError):
    """Not enough eligible negatives to build a candidate set."""


class EmptyDatasetError(ParagonError):
    """A filter removed every user."""


class ConfigError(ParagonError):
    """Invalid configuration value."""


class ShapeError(ParagonError):
    """Tensor shape or manifest mismatch."""


class TrainingError(ParagonError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TuningError(TrainingError):
    """Adapter tuning diverged."""


class CorpusError(ParagonError):
    """Corpus construction failed for a named task."""


class DependencyError(ParagonError):
    """A required upstream artifact is missing."""

    def __init__(self, artifact, producer):
        super().__init__(
            f"missing artifact {artifact!r}; run the {producer!r} command first"
        )
        self.artifact = artifact
        self.producer = producer
