"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class PursuitError(Exception):
    exit_code = 4


class ConfigError(PursuitError):
    exit_code = 2


class FormatError(PursuitError):
    exit_code = 3


class InvalidStateError(PursuitError, ValueError):
    pass


class GenerationError(PursuitError):
    pass


class DomainError(PursuitError, ValueError):
    pass


class ShapeError(PursuitError, ValueError):
    pass


class ClusteringError(PursuitError, ValueError):
    pass


class PlanningError(PursuitError):
    pass


class NumericError(PursuitError, FloatingPointError):
    pass


class TrainingDivergedError(NumericError):
    pass
