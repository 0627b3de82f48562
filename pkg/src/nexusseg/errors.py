"""Exception types shared across the package."""


class NexusError(Exception):
    pass


class ShapeError(NexusError, ValueError):
    pass


class ParameterError(NexusError, ValueError):
    pass


class StateError(NexusError, RuntimeError):
    pass


class BoundsError(NexusError, IndexError):
    pass


class VersionError(NexusError):
    pass


class ConfigError(NexusError, ValueError):
    pass


class DimensionError(ShapeError):
    """Raised by the static dimension checker.

    ``report`` holds one line per edge visited, the failing edge last.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = list(report or [])

    def __str__(self):
        base = super().__str__()
        if not self.report:
            return base
        return base + "\n" + "\n".join("  " + line for line in self.report)


class NumericError(NexusError, FloatingPointError):
    pass
