"""Exception types shared across the package."""


class KfsegError(Exception):
    """Base class for all package errors."""


class MissingManifest(KfsegError):
    pass


class MalformedManifest(KfsegError):
    pass


class CountMismatch(KfsegError):
    pass


class UnknownVideo(KfsegError):
    pass


class DecodeError(KfsegError):
    pass


class ShapeError(KfsegError):
    pass


class InvalidConfig(KfsegError):
    pass


class WeightsMismatch(KfsegError):
    pass


class UninitializedState(KfsegError):
    pass


class StateError(KfsegError):
    pass


class StateMismatch(StateError):
    pass


class EmptyMask(KfsegError):
    pass


class EmptyInput(KfsegError):
    pass


class TooFewVideos(KfsegError):
    pass


class NonFiniteLoss(KfsegError):
    pass


class VersionMismatch(KfsegError):
    pass


class CorruptArchive(KfsegError):
    pass


class OutOfBounds(KfsegError):
    pass


class IoError(KfsegError):
    pass
