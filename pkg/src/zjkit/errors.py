"""Exception hierarchy shared across the toolbox."""


class ZjError(Exception):
    """Base class for all toolbox errors."""


# tensor core
class ShapeMismatch(ZjError):
    pass


class NonFiniteValue(ZjError):
    pass


class NotScalar(ZjError):
    pass


class DetachedRoot(ZjError):
    pass


class ConvergenceFailure(ZjError):
    pass


# model zoo / checkpoints
class SpecMismatch(ZjError):
    pass


class CorruptCheckpoint(ZjError):
    pass


class ChecksumMismatch(CorruptCheckpoint):
    pass


class IoError(ZjError):
    pass


class UnknownHook(ZjError):
    pass


class UnknownPath(ZjError):
    pass


class BadPattern(ZjError):
    pass


# architect
class ParseError(ZjError):
    def __init__(self, offset, expected, message=None):
        self.offset = offset
        self.expected = frozenset(expected)
        detail = message or "expected one of: " + ", ".join(sorted(self.expected))
        super().__init__(f"parse error at offset {offset}: {detail}")


class NoMatchingSite(ZjError):
    pass


class IncompatibleSite(ZjError):
    pass


class PlanMismatch(ZjError):
    pass


class NotMergeable(ZjError):
    pass


# tuner
class LabelOutOfRange(ZjError):
    pass


class EmptyClass(ZjError):
    pass


class MissingHook(ZjError):
    pass


class WidthMismatch(ZjError):
    pass


class BatchMismatch(ZjError):
    pass


class DegenerateBatch(ZjError):
    pass


class RefMismatch(ZjError):
    pass


class NotAMatrix(ZjError):
    pass


class KOutOfRange(ZjError):
    pass


class NonFiniteLoss(ZjError):
    def __init__(self, term, value):
        self.term = term
        super().__init__(f"non-finite loss in term '{term}': {value}")


# merger
class EmptyInput(ZjError):
    pass


class NonFiniteCost(ZjError):
    pass


class NoConvergence(ZjError):
    pass


class NotSupportedKind(ZjError):
    pass


class AmbiguousAssignment(ZjError):
    pass


class SizeMismatch(ZjError):
    pass


class ClassCountMismatch(ZjError):
    pass


class DegenerateUnit(ZjError):
    pass


# data / cli
class BadMagic(ZjError):
    pass


class LabelMismatch(ZjError):
    pass


class MalformedCsv(ZjError):
    pass


class ConfigError(ZjError):
    pass
