"""
Exception hierarchy for the L2D toolkit.

Library code raises these; the CLI catches ``L2DError`` and turns it into a
logged message and a non-zero exit status.
"""

from typing import Optional


class L2DError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(L2DError, ValueError):
    """Invalid or missing configuration value."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class ContextOverflowError(L2DError, ValueError):
    """Sequence would exceed the model's ``max_seq_len``."""


class GradientContractError(L2DError, ValueError):
    """``backward`` was called on something other than a scalar."""


class DegenerateProjectionError(L2DError, ValueError):
    """A projected vocabulary embedding has (near) zero norm."""


class VelocitySingularityError(L2DError, ValueError):
    """Velocity requested too close to t = 1."""


class AdaptiveStepError(L2DError, RuntimeError):
    """Adaptive solver step size underflowed or the step budget ran out."""


class NonFiniteError(L2DError, ValueError):
    """NaN or Inf found where finite values are required."""


class CacheError(L2DError, ValueError):
    """KV cache does not cover the positions a caller asked for."""


class CheckpointError(L2DError, IOError):
    """Checkpoint missing, corrupted or incompatible with the requested config."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class DivergenceError(L2DError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int = -1,
                 last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.last_good_checkpoint = last_good_checkpoint
