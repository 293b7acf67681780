"""Exception types raised across the package."""


class ECNPError(Exception):
    """Base class for every error raised by ecnp."""


class ShapeMismatch(ECNPError, ValueError):
    pass


class NonScalarRoot(ECNPError, ValueError):
    pass


class DomainError(ECNPError, ValueError):
    pass


class InvalidParams(ECNPError, ValueError):
    pass


class AlphaTooSmall(InvalidParams):
    pass


class EmptyContext(ECNPError, ValueError):
    pass


class CholeskyFailure(ECNPError, RuntimeError):
    pass


class KTooLarge(ECNPError, ValueError):
    pass


class BadMagic(ECNPError, ValueError):
    pass


class TruncatedFile(ECNPError, ValueError):
    pass


class NonFiniteLoss(ECNPError, RuntimeError):
    pass


class VersionMismatch(ECNPError, ValueError):
    pass


class CorruptFile(ECNPError, ValueError):
    pass


class UnknownKey(ECNPError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown key"


class ConfigTypeError(ECNPError, TypeError):
    pass


class MissingRequired(ECNPError, ValueError):
    pass
