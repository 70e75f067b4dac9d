"""Exception hierarchy shared across the package."""


class P2UError(Exception):
    """Base class for all package errors."""


class FormatError(P2UError):
    """A serialized artifact could not be parsed."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class DigestMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class PayloadExhaustedError(FormatError):
    """The entropy decoder needed more bytes than the payload holds."""


class ModelMismatchError(P2UError, ValueError):
    """Two models (or a model and an update) do not share names/shapes."""


class BaseMismatchError(P2UError):
    """An update was applied to a base it was not computed against."""


class InvalidStateError(P2UError):
    """A client session operation was attempted in the wrong state."""


class ProtocolError(P2UError):
    """Malformed frame or unexpected message on the wire."""


class RemoteError(P2UError):
    """The server answered with an error response."""

    def __init__(self, code, message):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message
