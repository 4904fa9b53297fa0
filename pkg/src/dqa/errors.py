"""Exception hierarchy shared by every module."""


class DQAError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(DQAError, ValueError):
    pass


class AllZeroLayer(DQAError, ValueError):
    """Raised when a layer's max absolute value is zero, so no step size exists."""


class OutOfRange(DQAError, ValueError):
    pass


class ConfigMismatch(DQAError, ValueError):
    pass


# -- entropy coding ---------------------------------------------------------

class SymbolOutOfRange(DQAError, ValueError):
    pass


class EmptyHistogram(DQAError, ValueError):
    pass


class UncodedSymbol(DQAError, KeyError):
    pass


class CorruptStream(DQAError, ValueError):
    """The shifting-error stream does not decode to what the header promises."""


class TruncatedStream(CorruptStream):
    pass


class InvalidCode(CorruptStream):
    pass


# -- ranking ------------------------------------------------------------------

class UnknownLayer(DQAError, KeyError):
    pass


class ModelMismatch(DQAError, ValueError):
    pass


class EvaluatorFailure(DQAError, RuntimeError):
    def __init__(self, layer_id, channel, cause):
        super().__init__(f"evaluator failed on layer {layer_id!r}, channel {channel}: {cause}")
        self.layer_id = layer_id
        self.channel = channel
        self.cause = cause


# -- binary formats -------------------------------------------------------------

class FormatError(DQAError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class Truncated(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass
