"""Exception hierarchy shared by all fdbench modules."""


class FdError(Exception):
    """Base class for every error raised by fdbench."""


class DimensionError(FdError, ValueError):
    pass


class InputError(FdError, ValueError):
    pass


class NumericError(FdError, ArithmeticError):
    pass


class NoSolutionError(FdError):
    """A matrix equation has no (stabilizing) solution for the given data."""


class SingularSystemError(NoSolutionError):
    pass


class SynthesisError(FdError):
    """An observer cannot be designed because a structural assumption fails."""


class NoUioExists(SynthesisError):
    pass


class NotDetectable(SynthesisError):
    pass


class StructureError(FdError):
    pass


class UnboundedGainError(FdError):
    pass


class ThresholdUndefinedError(FdError):
    pass


class ParameterError(FdError, ValueError):
    pass


class ScenarioError(FdError, ValueError):
    pass


class DivergenceError(FdError):
    def __init__(self, message, time):
        super().__init__(f"{message} (t = {time:.6g} s)")
        self.time = time


class CertificateError(FdError):
    pass


class CertificateParseError(CertificateError):
    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class UnverifiedCertificateError(CertificateError):
    pass


class AnnotationSyntaxError(FdError, ValueError):
    pass
