"""Exception hierarchy shared by all cardiomark modules."""


class CardiomarkError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CardiomarkError, ValueError):
    """Invalid configuration: bad shapes, bad architecture, bad flags."""


class NumericError(CardiomarkError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(CardiomarkError, RuntimeError):
    """Operation requires state that has not been initialized."""


class UsageError(CardiomarkError, ValueError):
    """API misuse: mismatched frames, views, or call protocol."""


class GeometryError(CardiomarkError, ValueError):
    """Degenerate geometry (coincident points, zero-length axes)."""


class StatisticsError(CardiomarkError, ValueError):
    """Degenerate statistical input (too few samples, zero variance)."""


class IngestError(CardiomarkError, ValueError):
    """Malformed annotation or dataset input."""


class CheckpointError(CardiomarkError, RuntimeError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic or undecodable header."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version not supported."""


class TruncatedCheckpointError(CheckpointError):
    """Payload shorter than the header's tensor table requires."""


class InconsistentCheckpointError(CheckpointError):
    """Header architecture disagrees with the tensor table or payload."""


class ProtocolError(CardiomarkError, RuntimeError):
    """Malformed or oversized frame on the inference wire protocol."""
