"""Exception hierarchy shared by the library and the command line.

Each family maps to one stable process exit code (see ``exit_code_for``).
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class ToolkitError(Exception): pass

class ConfigError(ToolkitError): pass

class ShapeError(ToolkitError, ValueError): pass

class ArtifactError(ToolkitError): pass

class NumericalError(ToolkitError): pass

class FactorizationError(NumericalError): pass


class TrainingDivergedError(NumericalError):
    """Raised when a loss turns non-finite; keeps the partial record for the caller."""
    def __init__(self, message: str, epoch: int, iteration: int, record=None):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration
        self.record = record


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ShapeError)):
        return EXIT_USAGE
    if isinstance(exc, (ArtifactError, OSError)):
        return EXIT_IO
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, ValueError):
        return EXIT_USAGE
    return EXIT_NUMERICAL
