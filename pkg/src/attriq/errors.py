"""Exception hierarchy shared by every attriq module."""


class AttriqError(Exception):
    """Base class for all errors raised by attriq."""


# model engine
class ShapeMismatch(AttriqError, ValueError):
    pass


class NonFiniteInput(AttriqError, ValueError):
    pass


class ClassOutOfRange(AttriqError, IndexError):
    pass


class NotDifferentiable(AttriqError, TypeError):
    pass


class LayerNotConvolutional(AttriqError, ValueError):
    pass


# attribution
class TooManyFeatures(AttriqError, ValueError):
    pass


class SingularSystem(AttriqError, ArithmeticError):
    """The weighted least-squares system is rank deficient; retry with more coalitions."""


class PatchLargerThanImage(AttriqError, ValueError):
    pass


class ZeroVarianceWarning(UserWarning):
    """A background column is constant; its perturbation scale falls back to 1.0."""


# metrics
class EmptyDataset(AttriqError, ValueError):
    pass


# data io
class ParseError(AttriqError, ValueError):
    def __init__(self, message, line=None, column=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.column = column


class RaggedRow(ParseError):
    pass


class NonNumericCell(ParseError):
    pass


class BadMagic(AttriqError, ValueError):
    pass


class UnsupportedDtype(AttriqError, ValueError):
    pass


class FortranOrderUnsupported(AttriqError, ValueError):
    pass


class SchemaViolation(AttriqError, ValueError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ConfigError(AttriqError, ValueError):
    pass
