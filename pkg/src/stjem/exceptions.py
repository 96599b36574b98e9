"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class DimensionError(InvalidArgumentError):
    """Array shapes or model dimensions do not agree."""


class FormatError(ValueError):
    """A binary or text file could not be parsed.

    ``offset`` is the byte offset (binary files) or line number (text files)
    at which parsing failed, when known.
    """

    def __init__(self, message, offset=None, unit="offset"):
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)
        self.offset = offset


class SamplerDivergenceError(RuntimeError):
    """SGLD produced a non-finite gradient or iterate."""

    def __init__(self, step, message="non-finite gradient during SGLD"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ResourceLimitError(RuntimeError):
    """A brute-force computation would exceed its size guard."""


class TrainingFailedError(RuntimeError):
    """Training diverged more often than the rollback budget allows."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
