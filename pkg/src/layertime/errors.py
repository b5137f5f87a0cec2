"""Exception types raised by layertime."""


class LayertimeError(Exception):
    """Base class for all recoverable layertime errors."""


class BlowUpError(LayertimeError, FloatingPointError):
    """A propagation produced non-finite values.

    Attributes
    ----------
    layer : int or None
        Layer (time index) on the grid where the blow-up was detected.
    level : int or None
        Multigrid level, when raised from inside a multigrid solve.
    """

    def __init__(self, message, layer=None, level=None):
        super().__init__(message)
        self.layer = layer
        self.level = level


class ConfigError(LayertimeError, ValueError):
    """Invalid run configuration. ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataFormatError(LayertimeError, ValueError):
    """Malformed data or log file. ``row`` is 1-based, counting the header."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
