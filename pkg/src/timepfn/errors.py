"""Exception types shared across the package."""


class TimePFNError(Exception):
    """Base class for all package errors."""


class NonFiniteParameter(TimePFNError, ValueError):
    pass


class FactorizationFailed(TimePFNError, ArithmeticError):
    pass


class ShapeMismatch(TimePFNError, ValueError):
    pass


class WindowTooLong(TimePFNError, ValueError):
    pass


class CorpusFormatError(TimePFNError, ValueError):
    """Raised for malformed or truncated corpus and checkpoint files."""


class NotScalarLoss(TimePFNError, ValueError):
    pass


class DivergedLoss(TimePFNError, ArithmeticError):
    """Training loss became non-finite.

    ``last_good_state`` holds the parameters from the last finite step.
    """

    def __init__(self, message, last_good_state=None, step=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.step = step


class EmptyBudget(TimePFNError, ValueError):
    pass


class ContextTooShort(TimePFNError, ValueError):
    pass


class ParseError(TimePFNError, ValueError):
    """CSV parse failure; ``row`` and ``column`` locate the offending cell."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NonNumericCell(ParseError):
    pass
