class SegAdaptError(Exception):
    pass


class ConfigurationError(SegAdaptError):
    pass


class ArgumentError(SegAdaptError, ValueError):
    pass


class ParseError(SegAdaptError):

    def __init__(self, message, entry=None):
        super().__init__(message)
        self.entry = entry


class LabelSpaceError(SegAdaptError):
    pass


class EmptyCoverageError(SegAdaptError):
    pass


class InfeasibleConstraintsError(SegAdaptError):

    def __init__(self, message, violated=None):
        super().__init__(message)
        self.violated = violated or []


class NonFiniteLossError(SegAdaptError):

    def __init__(self, term, diagnostics=None):
        super().__init__(f'Non-finite value in loss term {term!r}')
        self.term = term
        self.diagnostics = diagnostics or {}


class CheckpointError(SegAdaptError):
    pass


class DatasetError(SegAdaptError):

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class WorkdirLockedError(SegAdaptError):
    pass
