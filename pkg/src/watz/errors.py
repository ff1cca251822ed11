"""Exception hierarchy shared by the protocol modules."""


class WatzError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(WatzError):
    pass


class InvalidPointError(WatzError):
    """Peer point is off-curve, the identity, or badly encoded."""


class DecryptionError(WatzError):
    """AEAD authentication failed."""

    reason = "decryption-error"


class MalformedMessageError(WatzError):
    pass


class MalformedEvidenceError(MalformedMessageError):
    pass


class FrameError(WatzError):
    pass


class BadMagicError(FrameError):
    pass


class UnknownTypeError(FrameError):
    pass


class OversizeError(FrameError):
    pass


class TruncatedError(FrameError):
    pass


class StateError(WatzError):
    """Operation invoked in the wrong protocol phase."""


class ProtocolError(WatzError):
    """A peer message failed an authentication or consistency check.

    ``reason`` is one of the stable reason codes (``mac-mismatch``,
    ``identity-mismatch``, ``signature-invalid``, ``decryption-error``,
    ``invalid-point``, ``anchor-mismatch``).
    """

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)
