"""Shared exception types."""


class CorrolabError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(CorrolabError, ValueError):
    """An array had the wrong shape for the operation."""

    def __init__(self, what, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class NonFiniteError(CorrolabError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""

    def __init__(self, where, step=None):
        self.where = where
        self.step = step
        msg = f"non-finite value in {where}"
        if step is not None:
            msg += f" at step {step}"
        super().__init__(msg)


class DegenerateRepresentation(CorrolabError, ValueError):
    """A latent vector had zero norm where a direction was required."""


class EpisodeFinished(CorrolabError, RuntimeError):
    """env_step was called on a state already at the horizon."""


class StrategyError(CorrolabError, ValueError):
    """A negative-pair strategy was misconfigured or inapplicable."""


class TabulationError(CorrolabError, ValueError):
    """A plain-text oracle tabulation failed to parse or validate."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(CorrolabError, ValueError):
    """An experiment configuration was invalid."""
