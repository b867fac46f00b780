"""
errors.py
---------
Exception hierarchy for the co-segmentation backend.

Library code raises these; only the CLI turns them into exit codes:
0 success, 1 usage/config error, 2 data validation failure, 3 numerical failure.
"""


class CosegError(Exception):
    """Base class for every error raised by the backend."""

    exit_code = 1
    stage = 'coseg'


class ConfigError(CosegError, ValueError):
    """Invalid configuration value or flag combination."""

    stage = 'config'


class DatasetValidationError(CosegError):
    """Dataset violates one or more type invariants."""

    exit_code = 2
    stage = 'validate'

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class DimensionMismatchError(CosegError, ValueError):
    """Feature dimensions disagree between inputs."""

    exit_code = 2
    stage = 'validate'


class InvalidSkeletonError(CosegError, ValueError):
    """Skeleton does not resolve the topology, or a body part has zero length."""

    exit_code = 2
    stage = 'featurize'


class InstanceTooLargeError(CosegError, ValueError):
    """Exhaustive enumeration requested beyond the K^N guard."""

    stage = 'verify'


class NumericalError(CosegError, ArithmeticError):
    """Non-finite value produced during inference or learning."""

    exit_code = 3
    stage = 'train'

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
