class PsjointError(Exception):
    """Base class for all errors raised by psjoint."""


class MeshConstructionError(PsjointError):
    pass


class MeshRefinementError(PsjointError):
    pass


class FemAssemblyError(PsjointError):
    pass


class ParameterError(PsjointError, ValueError):
    pass


class SiteTableError(PsjointError):
    pass


class ModelAssemblyError(PsjointError):
    pass


class NonFiniteError(PsjointError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class FactorizationError(PsjointError):
    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class ConvergenceError(PsjointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class InitializationError(PsjointError):
    pass


class SimulationError(PsjointError):
    pass


class StudyError(PsjointError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ExposureError(PsjointError):
    pass


class PreprocessError(PsjointError):
    pass


class ConfigError(PsjointError):
    pass


class SchemaError(PsjointError):
    pass
