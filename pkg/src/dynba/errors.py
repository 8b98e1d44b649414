"""Exception types shared across the package."""


class DynBAError(Exception):
    """Base class for all errors raised by dynba."""


class InvalidDepthError(DynBAError, ValueError):
    pass


class BehindCameraError(DynBAError, ValueError):
    pass


class DegenerateConfigurationError(DynBAError, ValueError):
    pass


class DomainError(DynBAError, ValueError):
    """A scalar argument fell outside its admissible interval."""


class InfeasibleSceneError(DynBAError):
    pass


class SolverFailureError(DynBAError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnderConstrainedFrameError(DynBAError):
    def __init__(self, message, frame=None, count=None):
        super().__init__(message)
        self.frame = frame
        self.count = count


class DivergedError(DynBAError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term
