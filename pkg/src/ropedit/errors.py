class RopeditError(Exception):
    """Base class for all package errors."""


class DimensionError(RopeditError, ValueError):
    pass


class ConfigError(RopeditError, ValueError):
    pass


class InputError(RopeditError, ValueError):
    pass


class InjectionError(RopeditError, ValueError):
    def __init__(self, message, layer=None, t=None):
        if layer is not None or t is not None:
            message = f"{message} (layer={layer}, t={t})"
        super().__init__(message)
        self.layer = layer
        self.t = t


class EmptyMaskError(RopeditError):
    """Raised when a mask that must contain foreground cells is empty."""


class ReasoningError(EmptyMaskError):
    """Attention reasoning produced no usable region."""
