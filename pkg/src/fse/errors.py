"""Exception hierarchy shared by every stage of the pipeline."""


class FseError(Exception):
    """Base class for all package errors."""


class ShapeError(FseError, ValueError):
    pass


class ConfigError(FseError, ValueError):
    pass


class ImageFormatError(FseError, ValueError):
    pass


class PairingError(FseError):
    pass


class NumericError(FseError, ArithmeticError):
    pass


class StateError(FseError):
    pass


class NonFiniteLossError(NumericError):
    """Raised by the training loop when a loss term stops being finite."""

    def __init__(self, step: int, term: str, value: float):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss at step {step}: term '{term}' = {value}")
