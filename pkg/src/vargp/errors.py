"""Exception hierarchy shared across the package."""


class VargpError(Exception):
    """Base class for all errors raised by :mod:`vargp`."""


class DimensionError(VargpError, ValueError):
    """Operands have incompatible shapes."""


class NumericalDegeneracyError(VargpError, ArithmeticError):
    """A factorization or solve failed, or produced non-finite values."""


class DegenerateKernelError(NumericalDegeneracyError):
    """A kernel matrix could not be factored even after jitter escalation."""


class NonFiniteError(NumericalDegeneracyError):
    """A loss or gradient became non-finite during training.

    ``dump`` holds a JSON-serializable diagnostics snapshot.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class CheckpointError(VargpError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class DataFormatError(VargpError, ValueError):
    """An input data file does not follow the expected format."""


class ConfigError(VargpError, ValueError):
    """An experiment configuration is invalid."""
