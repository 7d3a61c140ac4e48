"""
Error types
Every failure the CLI can report maps to its own exit code
"""


class NNQCError(Exception):
    """Base class for all nnqc failures"""

    exit_code = 1


class ConfigError(NNQCError, ValueError):
    """Invalid or inconsistent run configuration"""

    exit_code = 2


class MissingPrerequisiteError(NNQCError):
    """A command was run before the artifact it depends on exists"""

    exit_code = 3


class TrainingDivergenceError(NNQCError):
    """Training produced non-finite losses for too many consecutive steps"""

    exit_code = 4


class NonFiniteLossError(TrainingDivergenceError):
    """A single loss evaluation was NaN or infinite"""


class BandUnreachableError(NNQCError):
    """No degradation inside the requested quality band was found"""

    exit_code = 5

    def __init__(self, message: str, best_dsc: float = float("nan")):
        super().__init__(message)
        self.best_dsc = best_dsc


class FingerprintMismatchError(NNQCError):
    """Checkpoint was trained on a dataset with a different fingerprint"""

    exit_code = 6


class DataError(NNQCError, ValueError):
    """Input volumes or datasets are unusable"""

    exit_code = 7


class ChecksumError(NNQCError):
    """Stored weights do not match the digest recorded in their manifest"""

    exit_code = 8
