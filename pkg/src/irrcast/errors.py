"""Exception hierarchy shared by every irrcast module."""


class IrrcastError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(IrrcastError, ValueError):
    pass


class NonFiniteInput(IrrcastError, ValueError):
    pass


class NotScalar(IrrcastError, ValueError):
    pass


class DetachedTensor(IrrcastError, RuntimeError):
    pass


class TapeConsumed(DetachedTensor):
    """backward() was called twice on the same graph without a new forward pass."""


class MissingGradient(IrrcastError, RuntimeError):
    pass


# data ingestion / windowing
class ParseError(IrrcastError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class NonMonotonicTimestamps(IrrcastError, ValueError):
    pass


class RateOutOfRange(IrrcastError, ValueError):
    pass


class SeriesTooShort(IrrcastError, ValueError):
    pass


class BadFractions(IrrcastError, ValueError):
    pass


class DegenerateSpan(IrrcastError, ValueError):
    pass


class AllNullVariable(IrrcastError, ValueError):
    pass


class BadParams(IrrcastError, ValueError):
    pass


# positional embeddings
class OddDimension(IrrcastError, ValueError):
    pass


class FieldOutOfRange(IrrcastError, ValueError):
    pass


class TimeOutOfTableRange(IrrcastError, IndexError):
    pass


class WindowTooLong(IrrcastError, IndexError):
    pass


class TooFewSamples(IrrcastError, ValueError):
    pass


# splines / CDE
class TooFewKnots(IrrcastError, ValueError):
    pass


class NonMonotonicKnots(IrrcastError, ValueError):
    pass


class NonFiniteState(IrrcastError, FloatingPointError):
    pass


# training / evaluation
class EmptyMask(IrrcastError, ValueError):
    pass


class EmptyDataset(IrrcastError, ValueError):
    pass


class NonFiniteLoss(IrrcastError, FloatingPointError):
    pass


class EmptyCell(IrrcastError, ValueError):
    pass
