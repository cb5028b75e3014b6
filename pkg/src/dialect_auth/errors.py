"""Exception hierarchy shared by every subsystem."""


class DialectAuthError(Exception):
    """Base class for all errors raised by this package."""


class UnknownDialect(DialectAuthError, KeyError):
    pass


class EmptyResponse(DialectAuthError, ValueError):
    pass


class BadRequest(DialectAuthError, ValueError):
    """Request text or request context is malformed."""


class EmptyRequest(BadRequest):
    pass


class DimensionMismatch(DialectAuthError, ValueError):
    pass


class EmptyBatch(DialectAuthError, ValueError):
    pass


class CostLengthMismatch(DialectAuthError, ValueError):
    pass


class TradeOffOutOfRange(DialectAuthError, ValueError):
    pass


class EmptyDataset(DialectAuthError, ValueError):
    pass


class EmptyNode(DialectAuthError, ValueError):
    pass


class TooManyPackets(DialectAuthError, ValueError):
    pass


class TooManyFields(DialectAuthError, ValueError):
    pass


class MalformedTree(DialectAuthError, ValueError):
    pass


class ModelFormatError(DialectAuthError, ValueError):
    """Base for serialized model/tree decoding failures."""


class BadMagic(ModelFormatError):
    pass


class TruncatedFile(ModelFormatError):
    pass


class DimMismatch(ModelFormatError):
    pass


class MissingWordSource(DialectAuthError, FileNotFoundError):
    pass


class OversizedField(DialectAuthError, ValueError):
    pass


class MqttDecodeError(DialectAuthError, ValueError):
    pass


class HarnessSetupFailure(DialectAuthError, RuntimeError):
    pass
