"""Exception types shared across the package."""


class SceneAtlasError(Exception):
    """Base class for all package errors."""


class DimensionError(SceneAtlasError):
    """Asset dimensions or counts disagree."""


class DecodeError(SceneAtlasError):
    """An input file could not be read or parsed."""


class DomainError(SceneAtlasError):
    """A coordinate fell outside its declared domain."""


class ConfigurationError(SceneAtlasError):
    """A config value or required asset is missing or inconsistent."""


class CheckpointIntegrityError(SceneAtlasError):
    """Checkpoint bytes are corrupt or truncated."""


class CheckpointVersionError(SceneAtlasError):
    """Checkpoint was written by an incompatible format version."""


class NumericError(SceneAtlasError):
    """A non-finite value surfaced where finite values are required."""


class TrainingError(SceneAtlasError):
    """Training aborted; message names the offending term and step."""


class ToolError(SceneAtlasError):
    """A registered tool failed or an unknown tool was requested."""


class ParseError(SceneAtlasError):
    """Planner output did not contain a recognizable action block."""


class TransportError(SceneAtlasError):
    """Remote planner endpoint unreachable after retries."""


class BusyError(SceneAtlasError):
    """The scene or session is already locked by another operation."""
