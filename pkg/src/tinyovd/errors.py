"""Exception types shared across the package."""


class TinyOvdError(Exception):
    """Base class for package-specific failures."""


class DomainError(TinyOvdError, ValueError):
    """Numeric input outside the documented domain (e.g. probability not in (0,1))."""


class DegenerateBatch(TinyOvdError, ValueError):
    """Difficulty weighting is undefined: every positive has IoU exactly 1."""


class RejectionExhausted(TinyOvdError, RuntimeError):
    """Rejection resampling hit its attempt cap; usually a tiny box at the image border."""


class ShapeError(TinyOvdError, ValueError):
    """Array or matrix shape violates an operation's contract."""


class NonFiniteActivation(TinyOvdError, FloatingPointError):
    """A forward-pass tensor produced NaN or Inf."""


class NonFiniteLoss(TinyOvdError, FloatingPointError):
    """A loss term produced NaN or Inf; the message names the offending term."""


class UnknownCategory(TinyOvdError, KeyError):
    """Shape or color name not present in the category space."""


class InsufficientLabelSpace(TinyOvdError, ValueError):
    """Requested more negative prompts than the label space can provide."""


class PlacementFailure(TinyOvdError, RuntimeError):
    """Scene generator could not place objects under the overlap constraint."""


class SchemaVersionMismatch(TinyOvdError, ValueError):
    """Dataset or checkpoint file carries an unsupported schema version."""


class CheckpointMismatch(TinyOvdError, ValueError):
    """Checkpoint tensor names/shapes do not match the receiving model."""


class SplitContamination(TinyOvdError, ValueError):
    """A held-out category combination appears in the checkpoint's training split."""


class ConfigError(TinyOvdError, ValueError):
    """Invalid configuration value; the message names the field."""
