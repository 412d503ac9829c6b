"""Exception hierarchy shared across the package."""


class ChunkstreamError(Exception):
    """Base class for all package errors."""


class ShapeError(ChunkstreamError):
    """Tensor extents do not line up for an operation."""


class ConfigError(ChunkstreamError):
    """Invalid or inconsistent configuration value."""


class DataError(ChunkstreamError):
    """Malformed input data, files, or alignments."""


class ProtocolError(ChunkstreamError):
    """API contract violated: out-of-order chunks, emission after completion."""


class MaskError(ChunkstreamError):
    """An attention row has no unmasked position to attend to."""


class NumericalError(ChunkstreamError):
    """Non-finite values or an infeasible numerical problem."""


class SearchError(ChunkstreamError):
    """No complete hypothesis found within the search budget.

    Carries the best partial hypothesis for diagnostics.
    """

    def __init__(self, message, best_partial=None):
        super().__init__(message)
        self.best_partial = best_partial
