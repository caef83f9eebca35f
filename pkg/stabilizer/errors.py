"""
Exceptions raised by the stabilizer stages
"""


class StabilizerError(Exception):
    """Base class for every stabilizer failure"""


class ConfigError(StabilizerError, ValueError):
    """Invalid or unknown configuration key"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


# Geometry

class DegenerateConfiguration(StabilizerError):
    pass


class TooFewPoints(StabilizerError):
    pass


class NoConsensus(StabilizerError):
    pass


class PointAtInfinity(StabilizerError):
    pass


# Observer

class EmptyFrame(StabilizerError):
    pass


class DimensionMismatch(StabilizerError):
    pass


class FlowFormatError(StabilizerError):
    """Malformed .flo file"""


# Propagation / smoothing / rendering

class EmptySample(StabilizerError):
    pass


class SpecMismatch(StabilizerError):
    """Grid field does not match the grid it is combined with"""


# Metrics

class AllFramesInvalid(StabilizerError):
    pass


class TooShort(StabilizerError):
    pass


# Synthetic data

class ViewportUnderflow(StabilizerError):
    """Rendered viewport leaves the scene texture"""


# Pipeline

class SourceError(StabilizerError):
    pass


class SinkError(StabilizerError):
    pass


class StageError(StabilizerError):
    """A pipeline worker failed; the original exception is chained"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause!r}")
