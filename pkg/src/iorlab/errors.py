"""Exception types shared across the package.

Everything that signals bad input derives from ``ValidationError`` (a
``ValueError``); the CLI maps those to exit code 2.
"""


class ValidationError(ValueError):
    pass


class EmptyDataset(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyLogitSet(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, line, message="malformed line"):
        self.line = line
        super().__init__(f"line {line}: {message}")


class LabelOutOfRange(ValidationError):
    pass


class InvalidRatios(ValidationError):
    pass


class MissingClass(ValidationError):
    pass


class InvalidDims(ValidationError):
    pass


class IdOutOfRange(ValidationError):
    pass


class NonPositiveTemperature(ValidationError):
    pass


class InvalidBracket(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DegenerateInput(ValidationError):
    pass


class UnknownExperiment(ValidationError):
    pass


class DegenerateGradient(RuntimeWarning):
    """Warning category: the min-norm combination vanished and a fallback
    direction was used."""
