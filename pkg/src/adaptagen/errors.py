"""Exception types raised by the pipeline."""


class AdaptagenError(Exception):
    """Base class for all domain errors; the CLI maps these to exit code 1."""


class DatasetError(AdaptagenError):
    """Dataset layout or sampling precondition violated."""


class ConfigError(AdaptagenError):
    """Invalid, unknown, or inconsistent configuration."""


class BackendError(AdaptagenError):
    """A pluggable backend failed or is not registered."""


class SelectionError(AdaptagenError):
    """Similarity matrix construction failed for an identified item."""


class TrainingError(AdaptagenError):
    """Adapter training could not start or had to abort."""


class GenerationError(AdaptagenError):
    """A single generation request failed after retry."""


class GenerationBatchError(AdaptagenError):
    """Too many requests in a batch failed."""

    def __init__(self, message: str, failed: int, total: int):
        super().__init__(message)
        self.failed = failed
        self.total = total


class PipelineError(AdaptagenError):
    """Stage orchestration failure (missing artifacts, bad stage names)."""
