"""Exception families raised across the project.

Library code raises these; only ``cli`` turns them into process exit codes.
"""


class DPMError(Exception):
    """Base class for every error the pipeline raises on purpose."""
    exit_code = 1


class ConfigError(DPMError):
    """Invalid or unknown configuration values."""
    exit_code = 2


class ShapeError(DPMError):
    """Operand shapes do not conform, or an input exceeds the model window."""
    exit_code = 3


class DataError(DPMError):
    """Corpus, checkpoint or label content that cannot be used."""
    exit_code = 3

    def __init__(self, message: str, record_index: int = None):
        super().__init__(message)
        self.record_index = record_index


class LabelError(DataError):
    """A class index outside ``[0, n_classes)``."""


class WindowViolationError(DPMError):
    """A sample cannot be processed under ``n_limit >= n_max + n_r``."""
    exit_code = 4

    def __init__(self, violation):
        super().__init__(str(violation))
        self.violation = violation


class NumericalAbort(DPMError):
    """A loss became NaN or infinite during optimisation."""
    exit_code = 5

    def __init__(self, message: str, epoch: int = None, step: int = None):
        super().__init__(f"{message} (epoch={epoch}, step={step})")
        self.epoch = epoch
        self.step = step


class LifecycleError(DPMError):
    """An adapter attached, detached or created out of order."""
    exit_code = 1
