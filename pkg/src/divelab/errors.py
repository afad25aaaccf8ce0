"""Exception hierarchy.

Argument-style failures subclass :class:`ValueError` so callers that only
know the standard library still catch them.
"""


class DiveError(Exception):
    """Base class for every error raised by divelab."""


class ArgumentError(DiveError, ValueError):
    pass


class ScheduleError(ArgumentError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SingularityError(ArgumentError):
    pass


class DegenerateEmbeddingError(ArgumentError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateRegionError(ArgumentError):
    pass


class TrainingError(DiveError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FittingError(DiveError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class GenerationError(DiveError, RuntimeError):
    def __init__(self, message, step=None, chain=None):
        super().__init__(message)
        self.step = step
        self.chain = chain


class ConsistencyError(DiveError):
    pass


class ConfigError(DiveError):
    def __init__(self, message, key_path=None):
        super().__init__(message)
        self.key_path = key_path


class FormatError(DiveError):
    pass


class DependencyError(DiveError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
