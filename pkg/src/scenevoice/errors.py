"""Exception types shared across the library."""


class SceneVoiceError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(SceneVoiceError):
    """Operands have incompatible shapes."""


class ZeroNormVector(SceneVoiceError):
    """Cosine similarity requested against a (near-)zero vector."""


class EmptyTape(SceneVoiceError):
    """backward() called on a tape with no recorded operations."""


class NonFiniteLoss(SceneVoiceError):
    """A loss component became NaN or infinite during training."""

    def __init__(self, component: str, step: int | None = None):
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component '{component}'{where}")


class PrototypeCollapse(SceneVoiceError):
    """World generation failed to draw sufficiently distinct prototypes."""


class InvalidProportions(SceneVoiceError):
    """Mode proportions do not form a valid distribution."""


class TooFewPairs(SceneVoiceError):
    """Not enough evaluation pairs for the requested recall cutoff."""


class VersionMismatch(SceneVoiceError):
    """Checkpoint was written by an incompatible format version."""


class CorruptFile(SceneVoiceError):
    """File is truncated, has a bad magic, or fails its checksum."""


class ConfigError(SceneVoiceError):
    """Invalid or unknown configuration input."""
