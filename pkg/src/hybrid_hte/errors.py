"""Exception hierarchy.

Validation problems map to CLI exit code 2, numerical failures to 3.
I/O failures surface as the builtin ``OSError`` (exit code 4).
"""


class HteError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(HteError, ValueError):
    exit_code = 2


class SchemaError(ValidationError):
    """A named column is missing, duplicated or not allowed."""


class ParseError(ValidationError):
    """A table cell could not be parsed."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(ValidationError):
    """A value lies outside its admissible domain."""


class InfeasibleError(ValidationError):
    """A structural constraint (fold balance, leaf sizes) cannot be met."""


class LeakageError(SchemaError):
    """A post-randomization variable was requested as a covariate."""


class ConfigError(ValidationError):
    pass


class AlignmentError(ValidationError):
    """Per-subject arrays have mismatched lengths."""


class PositivityError(ValidationError):
    """A training set lacks one of the treatment arms."""


class DegenerateError(ValidationError):
    """A column or label carries no information."""


class NumericError(HteError, ArithmeticError):
    exit_code = 3


class SingularDesignError(NumericError):
    pass


class SeparationError(NumericError):
    def __init__(self, message, column=None, beta=None):
        super().__init__(message)
        self.column = column
        self.beta = beta


class ConvergenceError(NumericError):
    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit
