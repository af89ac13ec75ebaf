"""Exception hierarchy shared by all modules."""


class PilotDesignError(Exception):
    """Base class for package errors."""


class ValidationError(PilotDesignError, ValueError):
    """Invalid parameters or inputs."""


class ConstructionFailed(PilotDesignError):
    """Hybrid construction gave up; ``constraint`` names what blocked it."""

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class InfeasibleSpec(ConstructionFailed):
    """The design parameters cannot be satisfied by any incidence matrix."""


class InsufficientData(PilotDesignError):
    pass


class DegenerateCovariance(PilotDesignError):
    pass


class SingularConditioning(PilotDesignError):
    pass


class ZeroTrueOptimum(PilotDesignError):
    pass


class ZeroNormSubject(PilotDesignError):
    pass


class ShapeMismatch(PilotDesignError, ValueError):
    pass


class InsufficientSubjects(PilotDesignError):
    pass


class ParseError(PilotDesignError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateObservation(ParseError):
    pass


class NonmonotoneGrid(ParseError):
    pass
