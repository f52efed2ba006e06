"""Exception hierarchy shared by every fsep module."""


class FsepError(Exception):
    """Base class for all library errors."""


class ConfigError(FsepError):
    """Bad user input: configuration, flags, or arguments."""


# numgrad
class ShapeMismatch(FsepError):
    pass


class NonFiniteInput(FsepError):
    pass


class NonScalarLoss(FsepError):
    pass


# data
class EmptyDirectory(FsepError):
    pass


class UnreadableImage(FsepError):
    pass


class NonSquareImage(FsepError):
    pass


class InvalidArgument(FsepError, ValueError):
    pass


class OverlappingSplits(FsepError):
    pass


class UnknownLabel(FsepError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# episodes
class SampleTooLarge(FsepError):
    pass


class InsufficientExamples(FsepError):
    pass


class WayExceedsClasses(FsepError):
    pass


class EnumerationTooLarge(FsepError):
    pass


# embed
class InvalidSpec(FsepError):
    pass


class BatchTooSmall(FsepError):
    pass


class LengthMismatch(FsepError):
    pass


# protonet
class EmptySupport(FsepError):
    pass


class ZeroVectorCosine(FsepError):
    pass


# train / checkpoint
class NonFiniteLoss(FsepError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite training loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class WayOrderingViolated(FsepError):
    pass


class VersionMismatch(FsepError):
    pass


class CorruptFile(FsepError):
    pass


# spectrum
class NonFiniteGradient(FsepError):
    pass


# cli
class UnknownKey(ConfigError):
    pass


class InvalidValue(ConfigError):
    pass
