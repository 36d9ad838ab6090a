"""Exception types shared across the package."""


class SchemaError(ValueError):
    """Inputs do not match the declared layout (feature widths, scalar names, parameter names)."""


class DataError(ValueError):
    """A dataset or sample cannot be used (empty split, no snapshots, ...)."""


class ProtocolError(ValueError):
    """An evaluation protocol's preconditions are not met."""


class MetricError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, lr=None, grad_norm=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm


class SolverError(FloatingPointError):
    pass


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class FormatError(DataError):
    """A binary file does not parse; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class StateError(RuntimeError):
    """An object is used in a state that does not allow the call (e.g. a parameter without a gradient)."""
