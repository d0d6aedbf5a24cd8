"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions disagree with a network spec or with each other."""


class DivergenceError(FloatingPointError):
    """Training produced non-finite (or runaway) values.

    ``context`` carries whatever the raising site knows: iteration index,
    chain id, last finite iterate, config snapshot.
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def __str__(self):
        base = super().__str__()
        if not self.context:
            return base
        extras = ", ".join(f"{k}={v!r}" for k, v in self.context.items() if k != "config")
        return f"{base} ({extras})"


class FormatError(ValueError):
    """A persisted artifact or input file is malformed."""


class GanDivergenceError(DivergenceError):
    """Generator or critic training produced non-finite values."""


class ConfigError(ValueError):
    """An experiment config has unknown keys or invalid values."""
