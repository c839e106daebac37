"""Exception hierarchy. CLI maps InputError to exit 2 and NumericError to exit 3."""


class SpotCheckError(Exception):
    pass


class InputError(SpotCheckError, ValueError):
    """Bad or malformed input data."""


class NumericError(SpotCheckError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class ContractError(InputError):
    """A precondition of a numeric routine was violated."""


class ParseError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateInputError(InputError):
    pass


class HprofFormatError(InputError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class HprofTruncatedError(HprofFormatError):
    pass


class SingularSystemError(NumericError):
    pass


class RankDeficiencyError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
