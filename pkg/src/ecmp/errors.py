"""Exception hierarchy.

Every error raised by the library derives from :class:`EcmpError`.  The three
middle classes map onto the CLI exit codes: validation problems, runtime
failures (I/O, missing inputs, iteration limits) and numerical failures.
"""


class EcmpError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(EcmpError, ValueError):
    """Invalid configuration, shapes or arguments."""

    exit_code = 2


class RuntimeFailure(EcmpError, RuntimeError):
    """Missing inputs, I/O problems and similar non-numerical failures."""

    exit_code = 3


class NumericalError(EcmpError, ArithmeticError):
    """A numerical routine could not produce a valid result."""

    exit_code = 4


class NotPositiveDefinite(NumericalError):
    def __init__(self, column, pivot=None):
        self.column = int(column)
        self.pivot = pivot
        msg = f"matrix is not positive definite (pivot at column {self.column}"
        if pivot is not None:
            msg += f", value {pivot:.3e}"
        super().__init__(msg + ")")


class NotChordal(ValidationError):
    pass


class SingularSeparator(NumericalError):
    pass


class NonFiniteMoment(NumericalError):
    pass


class NewtonDiverged(NumericalError):
    pass


class ImproperTilted(NumericalError):
    pass


class MissingEntry(NumericalError):
    pass


class SupportTooLarge(ValidationError):
    pass


class NonPSD(NumericalError):
    pass


class NegativeRate(NumericalError):
    pass


class NotStable(NumericalError):
    pass


class EventOutsideMesh(ValidationError):
    pass


class MaxItersExceeded(RuntimeFailure):
    """Raised only on request; the engine normally reports this in its result."""
