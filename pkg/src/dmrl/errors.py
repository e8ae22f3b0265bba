class DMRLError(Exception):
    """Base class for all package errors."""


class ConfigError(DMRLError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(DMRLError, ValueError):
    """Tensor shape does not satisfy an operation's contract."""


class CorruptDatasetError(DMRLError):
    """A dataset file is missing, truncated or fails its checksum."""


class CheckpointError(DMRLError):
    """A checkpoint archive is unreadable or incomplete."""


class TrainingDivergenceError(DMRLError, FloatingPointError):
    """A loss term became non-finite."""

    def __init__(self, term: str, value: float | None = None):
        self.term = term
        super().__init__(f"non-finite loss term {term!r} (value={value})")
