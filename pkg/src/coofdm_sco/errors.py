"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A configuration file could not be parsed or validated."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
