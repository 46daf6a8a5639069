class M4FuseError(Exception):
    """Base class for all package errors."""


class ShapeError(M4FuseError, ValueError):
    pass


class ParameterError(M4FuseError, ValueError):
    pass


class ConfigError(M4FuseError, ValueError):
    pass


class RoutingError(M4FuseError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataError(M4FuseError, ValueError):
    pass


class MetricError(M4FuseError, ValueError):
    pass


class TrainingError(M4FuseError, RuntimeError):
    pass
