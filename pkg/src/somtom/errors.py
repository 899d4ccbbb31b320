"""Exception and warning classes shared across the pipeline."""


class SomTomError(Exception):
    pass


class ValidationError(SomTomError, ValueError):
    pass


class TraceParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(SomTomError):
    pass


class InsufficientDataError(SomTomError):
    pass


class DegenerateConfigurationError(SomTomError):
    pass


class RobustFitFailedError(SomTomError):
    pass


class PointAtInfinityError(SomTomError):
    pass


class UndefinedMetricError(SomTomError):
    pass


class PipelineWarning(UserWarning):
    pass


class StabilizationSkipped(PipelineWarning):
    pass


class PlacementDegraded(PipelineWarning):
    pass


class NoForeground(PipelineWarning):
    pass


class ClusterCountClamped(PipelineWarning):
    pass


class DegenerateStats(PipelineWarning):
    pass
