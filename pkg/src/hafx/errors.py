"""Exception types shared across the package."""


class HafxError(Exception):
    pass


class ShapeError(HafxError):
    """Dimension mismatch or empty-dimension input."""


class ContractError(HafxError):
    """A precondition of an operation was violated."""


class NonFiniteError(HafxError):
    """A forward op produced NaN/Inf from finite inputs."""


class InputError(HafxError):
    """Bad runtime input (e.g. out-of-vocabulary token)."""


class ConfigError(HafxError):
    """Invalid run configuration."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(HafxError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass
