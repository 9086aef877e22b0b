"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Input violates an operation's preconditions."""


class ParseError(InvalidInputError):
    """Malformed data file. Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SearchFailure(RuntimeError):
    """Bandwidth search found no usable candidate."""

    def __init__(self, message, bandwidths=()):
        self.bandwidths = tuple(bandwidths)
        super().__init__(f"{message} (bandwidths: {list(self.bandwidths)})")


class FitFailure(RuntimeError):
    """Model fitting diverged."""

    def __init__(self, message, iteration=None, loss=None):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"{message} (iteration={iteration}, loss={loss})")
