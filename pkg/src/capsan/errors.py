"""Exception hierarchy shared by all capsan modules."""


class CapsanError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(CapsanError):
    pass


class EmptyOutput(CapsanError):
    pass


class NonFiniteValue(CapsanError):
    """A primitive produced (or was handed) NaN/Inf values."""


class NonScalarLoss(CapsanError):
    pass


class DegenerateOperator(CapsanError):
    pass


class UnknownClass(CapsanError):
    pass


class ConfigInvalid(CapsanError):
    pass


class LengthOutOfRange(CapsanError):
    pass


class BatchTooSmall(CapsanError):
    pass


class ClassTooSmall(CapsanError):
    pass


class EmptyMinoritySet(CapsanError):
    pass


class NonFiniteLoss(CapsanError):
    """Training produced a NaN/Inf loss; the run is aborted."""


class BadMagic(CapsanError):
    pass


class CountMismatch(CapsanError):
    pass


class TruncatedFile(CapsanError):
    pass


class UnsupportedClassCount(CapsanError):
    pass


class EmptyClass(CapsanError):
    pass


class SingleClass(CapsanError):
    pass


class DegenerateCovariance(CapsanError):
    pass


class BadCheckpoint(CapsanError):
    pass
