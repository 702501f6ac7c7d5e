"""Exception types shared across the package.

The command line maps ``SpecError`` to exit code 2 and ``NumericalAbort``
to exit code 3.
"""


class SpecError(ValueError):
    """An input violates a documented precondition."""


class ConfigError(SpecError):
    """A configuration file is malformed; carries the offending field."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class NumericalAbort(RuntimeError):
    """A simulation produced a non-finite state or failed to converge."""

    def __init__(self, message, step=None):
        self.step = step
        suffix = f" (step {step})" if step is not None else ""
        super().__init__(message + suffix)
