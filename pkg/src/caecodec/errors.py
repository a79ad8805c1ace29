"""Exception hierarchy shared by every stage of the codec."""


class CodecError(Exception):
    """Base class for all errors raised by caecodec."""


class ShapeError(CodecError, ValueError):
    pass


class NonFiniteError(CodecError, FloatingPointError):
    """A gradient, loss or parameter became NaN/Inf."""

    def __init__(self, message, name=None, iteration=None):
        super().__init__(message)
        self.name = name
        self.iteration = iteration


class TrainingDivergedError(NonFiniteError):
    def __init__(self, message, iteration=None, last_checkpoint=None):
        super().__init__(message, iteration=iteration)
        self.last_checkpoint = last_checkpoint


class DatasetError(CodecError):
    def __init__(self, message, rejects=()):
        super().__init__(message)
        self.rejects = list(rejects)


class RateTooSmallError(CodecError, ValueError):
    pass


class StreamError(CodecError):
    """Malformed coded-plane stream."""


class ContainerError(CodecError):
    """Malformed container; ``section`` names the part that failed to parse."""

    def __init__(self, message, section=None):
        if section is not None:
            message = f"{section}: {message}"
        super().__init__(message)
        self.section = section


class UnsupportedVersionError(ContainerError):
    pass


class CheckpointError(CodecError):
    pass


class ImageFormatError(CodecError):
    pass


class ConfigError(CodecError, ValueError):
    pass
