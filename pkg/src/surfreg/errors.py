"""Exception hierarchy shared across the pipeline.

Every error carries a ``category`` used by the CLI to pick its exit
message class: config | io | degenerate-input | internal.
"""


class SurfregError(Exception):
    category = "internal"


class InvalidParameterError(SurfregError):
    category = "config"


class InvalidDepthError(SurfregError):
    category = "degenerate-input"


class InsufficientPointsError(SurfregError):
    category = "degenerate-input"


class DegenerateFitError(SurfregError):
    category = "degenerate-input"


class DegenerateInputError(SurfregError):
    category = "degenerate-input"


class EmptyInitializationError(SurfregError):
    category = "degenerate-input"


class EmptySurfaceError(SurfregError):
    category = "degenerate-input"


class NoOverlapError(SurfregError):
    category = "degenerate-input"


class NoDepthError(SurfregError):
    category = "degenerate-input"


class NoDataError(SurfregError):
    category = "degenerate-input"


class OrderingError(SurfregError):
    category = "internal"


class FormatError(SurfregError):
    category = "io"


class RecordingIOError(SurfregError):
    category = "io"


class ConfigError(SurfregError):
    category = "config"
