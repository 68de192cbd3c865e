"""Exception hierarchy shared across the toolkit."""


class StrokeNextError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(StrokeNextError):
    """Invalid configuration, flags, or incompatible checkpoint/config."""


class DatasetError(StrokeNextError):
    """Dataset structure or split problems (empty classes, empty partitions)."""


class EvaluationError(StrokeNextError):
    """Metric preconditions violated (empty logs, single-class labels)."""


class ComparisonError(StrokeNextError):
    """Prediction logs cannot be paired (sample-id mismatch)."""

    def __init__(self, message, only_in_a=(), only_in_b=()):
        super().__init__(message)
        self.only_in_a = sorted(only_in_a)
        self.only_in_b = sorted(only_in_b)


class CheckpointError(StrokeNextError):
    """Corrupt or incompatible checkpoint files."""


class FingerprintMismatchError(ConfigurationError):
    """Checkpoint config fingerprint does not match the requested run."""


class NumericalError(StrokeNextError):
    """Non-finite loss or other numerical failure during training."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


class BenchError(StrokeNextError):
    """Benchmark failures (e.g. out of memory at a given batch size)."""
