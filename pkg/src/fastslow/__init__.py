"""Fast-slow systems driven by weakly dependent noise and their diffusion limits."""

from .errors import ConfigError, NumericalAbort, SpecError

__version__ = "0.1.0"
__all__ = ["ConfigError", "NumericalAbort", "SpecError", "__version__"]
