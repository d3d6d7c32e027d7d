"""
Exception hierarchy for Bench Sentry
Every operational failure raised by the utils package derives from BenchSentryError
"""

from typing import Optional


class BenchSentryError(Exception):
    """Base class for harness errors"""


class ConfigError(BenchSentryError):
    pass


class WorkloadLaunchError(BenchSentryError):
    """The workload executable could not be started"""


class WorkloadOOMError(BenchSentryError):
    def __init__(self, workload: str, batch_size: int):
        super().__init__(f"{workload} ran out of memory at batch size {batch_size}")
        self.workload = workload
        self.batch_size = batch_size


class MeasurementFailure(BenchSentryError):
    pass


class NoFeasibleBatchError(BenchSentryError):
    pass


class BatchSearchError(BenchSentryError):
    pass


class TraceParseError(BenchSentryError):
    """Malformed trace record; ``index`` is the offending record's position"""

    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index
        self.reason = reason


class TraceValidationError(BenchSentryError):
    pass


class ComparisonError(BenchSentryError):
    pass


class BaselineSchemaError(BenchSentryError):
    pass


class StoreLockedError(BenchSentryError):
    pass


class WebhookError(BenchSentryError):
    def __init__(self, message: str, status_code: Optional[int] = None):
        super().__init__(message)
        self.status_code = status_code


class UnsupportedCellError(BenchSentryError):
    """Requested mode or device is not in the workload's capability matrix"""
