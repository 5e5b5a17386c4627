"""
Exception hierarchy for the sequencer discovery pipeline
"""

from typing import List, Optional


class EDRSError(Exception):
    """Base class for every error raised by edrs components"""


class ShapeError(EDRSError, ValueError):
    """Tensor or layer dimensions do not line up"""


class LabelError(EDRSError, ValueError):
    """Class labels outside the supported set"""


class EmptyDatasetError(EDRSError, ValueError):
    """Training or evaluation requested on an empty dataset"""


class CalibrationError(EDRSError, ValueError):
    """The environmental factor cannot reach the requested synapse budget"""


class MetricsError(EDRSError, ValueError):
    """Confusion counts that cannot produce any metric"""


class ConfigError(EDRSError, ValueError):
    """Invalid configuration file or override"""


class CheckpointError(EDRSError, OSError):
    """Unreadable or inconsistent sequencer checkpoint"""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class MissingCheckpointError(CheckpointError):
    pass


class ReportError(EDRSError, OSError):
    """Report files cannot be written or read back"""


class DatasetError(EDRSError, ValueError):
    """
    Dataset construction failure.
    `problems` holds one diagnostic per offending file or record.
    """

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems = list(problems or [])
        if self.problems:
            message = f"{message}: " + "; ".join(self.problems)
        super().__init__(message)
