"""Exception types shared across the toolkit."""


class ILCError(Exception):
    """Base class for all toolkit errors."""


class InvalidParam(ILCError, ValueError):
    pass


class InvalidSpec(ILCError, ValueError):
    pass


class ShapeError(ILCError, ValueError):
    pass


class ShapeMismatch(ShapeError):
    pass


class EmptyInput(ILCError, ValueError):
    pass


class EmptyGroup(EmptyInput):
    pass


class EmptyValidation(EmptyInput):
    pass


class DivergenceError(ILCError, ArithmeticError):
    pass


class NumericalError(ILCError, ArithmeticError):
    pass


class DegenerateReference(NumericalError):
    """Probe-to-probe mean pairwise distance is zero."""


class DegenerateMeans(NumericalError):
    """Two class means coincide."""


class FrozenError(ILCError, RuntimeError):
    pass


class FormatError(ILCError, IOError):
    pass


class ChecksumError(FormatError):
    pass


class LayerNotFound(ILCError, KeyError):
    pass


class MissingLayer(LayerNotFound):
    pass


class ConfigError(ILCError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class MissingArtifact(ILCError, FileNotFoundError):
    pass


class RankDeficiency(UserWarning):
    """Fewer nonzero singular values than requested components."""
