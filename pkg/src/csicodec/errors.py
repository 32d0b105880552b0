"""Exception types shared across the package."""


class CodecError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CodecError, ValueError):
    pass


class NonFiniteInput(CodecError, ValueError):
    pass


class NonScalarLoss(CodecError, ValueError):
    pass


class InvalidConfig(CodecError, ValueError):
    pass


class InvalidRange(CodecError, ValueError):
    pass


class EmptyClusterSet(CodecError, ValueError):
    pass


class RankDeficient(CodecError, ArithmeticError):
    pass


class IoError(CodecError, OSError):
    pass


class CorruptCheckpoint(IoError):
    pass


class MalformedBitstream(CodecError, ValueError):
    pass


class IndivisibleShape(CodecError, ValueError):
    pass


class OddWidth(CodecError, ValueError):
    pass


class NonIntegerLatentChannels(CodecError, ValueError):
    pass


class InconsistentLatentLength(CodecError, ValueError):
    pass


class MixedShapesInGroup(CodecError, ValueError):
    pass


class InsufficientSamples(CodecError, ValueError):
    pass


class DivergedLoss(CodecError, ArithmeticError):
    pass


class ConflictingToggles(CodecError, ValueError):
    pass


class ZeroReference(CodecError, ValueError):
    pass
