"""Exception types shared across the toolkit."""


class SpkError(Exception):
    """Base class for all toolkit errors."""


class FormatError(SpkError, ValueError):
    """Input data has the wrong format (sample rate, channels, file layout)."""


class LengthError(SpkError, ValueError):
    """Input is too short for the requested operation."""


class EmptyFeaturesError(SpkError, ValueError):
    """Every frame of an utterance was rejected; callers usually skip it."""


class ShapeError(SpkError, ValueError):
    pass


class StateError(SpkError, RuntimeError):
    """Operation is not valid in the object's current state."""


class TapeError(StateError):
    pass


class NonFiniteError(SpkError, FloatingPointError):
    pass


class ConfigError(SpkError, ValueError):
    pass


class MappingError(SpkError, KeyError):
    pass


class MissingEmbeddingError(SpkError, KeyError):
    pass


class FitError(SpkError, RuntimeError):
    pass


class AlignmentError(SpkError, ValueError):
    pass


class SplitError(SpkError, ValueError):
    pass
