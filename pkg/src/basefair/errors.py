"""Exception types shared across the package."""


class EmptyInputError(ValueError):
    """An operation received a batch, list or dataset with no elements."""


class MissingGroupError(KeyError):
    """A (protected, target) cell needed by a metric has no samples."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"no samples for group (protected={key[0]}, target={key[1]})")

    def __str__(self):
        return self.args[0]


class DegenerateGroupError(ValueError):
    """A demographic or (protected, target) pair is empty where samples are required."""

    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"degenerate group {key!r}: no samples")


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when a non-finite value shows up in gradients or losses."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
