"""Exception hierarchy shared by every tdm module."""


class TDMError(Exception):
    """Base class for all errors raised by tdm."""


class TypeMismatch(TDMError, TypeError):
    pass


class DuplicateKey(TDMError, ValueError):
    pass


class KeyNotFound(TDMError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class IndexOutOfRange(TDMError, IndexError):
    pass


class NullAlreadyPresent(TDMError, ValueError):
    pass


class DuplicateDimensionName(TDMError, ValueError):
    pass


class ModeOutOfRange(TDMError, IndexError):
    pass


class ShapeMismatch(TDMError, ValueError):
    pass


class NonNumericValueType(TDMError, TypeError):
    pass


class EmptyInput(TDMError, ValueError):
    pass


class UnknownDimension(TDMError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DuplicateCondition(TDMError, ValueError):
    pass


class QuerySyntaxError(TDMError, ValueError):
    """Raised by the textual query parser; ``position`` is a 0-based offset."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class RankOutOfRange(TDMError, ValueError):
    pass


class AdapterFailure(TDMError):
    pass


class ArityMismatch(TDMError, ValueError):
    pass


class MergeConflict(TDMError, ValueError):
    pass


class DuplicateAdapterId(TDMError, ValueError):
    pass


class ConfigInvalid(TDMError, ValueError):
    pass


class SchemaError(TDMError, ValueError):
    pass


class WindowNotMultiple(TDMError, ValueError):
    pass


class SeriesTooShort(TDMError, ValueError):
    pass


class KTooLarge(TDMError, ValueError):
    pass
