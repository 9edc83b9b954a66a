"""Exception hierarchy shared by every pano_epipolar module.

Each class mixes in the closest builtin so callers may catch either the package
error or the standard one (``except ValueError`` keeps working).
"""


class PanoEpipolarError(Exception):
    """Root of all errors raised by this package."""


class InputError(PanoEpipolarError, ValueError):
    """Malformed or inconsistent input (parse class, exit status 2)."""


class TrajectoryParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class PoseValidationError(InputError):
    def __init__(self, message: str, frame: int | None = None):
        self.frame = frame
        prefix = f"frame {frame}: " if frame is not None else ""
        super().__init__(prefix + message)


class ConventionError(InputError):
    """A pose or pixel convention is missing or not accepted by the operation."""


class FormatError(InputError):
    """A binary or text artifact does not match its declared format."""


class ConfigError(InputError):
    """Configuration could not be resolved or instantiated."""


class ShapeMismatchError(PanoEpipolarError, ValueError):
    pass


class AllMaskedError(PanoEpipolarError, ValueError):
    pass


class NonFiniteError(PanoEpipolarError, FloatingPointError):
    pass


class DegenerateGeometryError(PanoEpipolarError, ArithmeticError):
    """The printed closed-form epipolar expressions are undefined for this input."""


class GenerationError(PanoEpipolarError, RuntimeError):
    pass


class MemoryBudgetError(PanoEpipolarError, MemoryError):
    pass


class ValidationFailure(PanoEpipolarError):
    """A validation suite ran to completion and at least one check failed."""
