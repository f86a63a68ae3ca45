"""Exception types shared across the package."""


class LidogError(Exception):
    pass


class ValidationError(LidogError, ValueError):
    pass


class FormatError(LidogError, ValueError):
    """Malformed binary input. ``offset`` is the byte offset of the first bad record."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(LidogError, ArithmeticError):
    def __init__(self, layer, message="non-finite activation"):
        super().__init__(f"{message} in layer '{layer}'")
        self.layer = layer


class UsageError(LidogError, RuntimeError):
    pass
