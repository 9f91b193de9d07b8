"""Exception hierarchy for the cryptotensors library.

Every error raised by this package derives from CryptoTensorsError, grouped
by subsystem so callers can catch at the granularity they need.
"""

from __future__ import annotations


class CryptoTensorsError(Exception):
    """Base class for all errors raised by this package."""


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------

class FormatError(CryptoTensorsError):
    """Base class for container parsing / building errors."""


class TruncatedFile(FormatError):
    pass


class HeaderTooLarge(FormatError):
    pass


class MalformedJson(FormatError):
    pass


class InvalidDtype(FormatError):
    pass


class LayoutError(FormatError):
    """Tensor table inconsistent with the body: overlap, gap, out-of-bounds
    or a size that disagrees with dtype x shape.

    ``kind`` is one of "overlap", "gap", "out_of_bounds", "size_mismatch".
    """

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class DuplicateName(FormatError):
    pass


class NameNotUtf8(FormatError):
    pass


class SignaturePresent(FormatError):
    """Canonicalization input still carries a signature field."""


class Overflow(FormatError):
    """Tensor byte size does not fit in an unsigned 64-bit count."""


# ---------------------------------------------------------------------------
# Cryptographic primitives
# ---------------------------------------------------------------------------

class CryptoError(CryptoTensorsError):
    pass


class AuthenticationFailed(CryptoError):
    """AEAD tag or key-wrap verification failed; no plaintext is available."""


class MalformedSignature(CryptoError):
    """Signature or key material has the wrong length or encoding."""


class RandomnessUnavailable(CryptoError):
    pass


# ---------------------------------------------------------------------------
# Key resolution / KBS client
# ---------------------------------------------------------------------------

class KeyResolutionError(CryptoTensorsError):
    pass


class MalformedKeyRef(KeyResolutionError):
    pass


class UnsupportedScheme(KeyResolutionError):
    pass


class NotFound(KeyResolutionError):
    pass


class NetworkError(KeyResolutionError):
    pass


class KbsDenied(KeyResolutionError):
    """Key broker refused to release the key (policy decision)."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class KbsSignatureRejected(KeyResolutionError):
    """Key broker did not accept the submitted header signature."""


class LengthMismatch(KeyResolutionError):
    pass


class MalformedResponse(KeyResolutionError):
    pass


class UntrustedSigningKey(KeyResolutionError):
    """No pinned key or pinned fingerprint vouches for the signing key."""


# ---------------------------------------------------------------------------
# Policy engine
# ---------------------------------------------------------------------------

class PolicyError(CryptoTensorsError):
    pass


class MalformedPolicy(PolicyError):
    pass


class UnknownOperator(PolicyError):
    pass


class UnsupportedLanguage(PolicyError):
    pass


class ProviderFailure(PolicyError):
    pass


# ---------------------------------------------------------------------------
# Serializer
# ---------------------------------------------------------------------------

class SerializeError(CryptoTensorsError):
    pass


class UnknownTensorInSelection(SerializeError):
    pass


class MetadataKeyCollision(SerializeError):
    pass


class SizeMismatch(SerializeError):
    """Supplied tensor bytes disagree with dtype x shape."""


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------

class LoadError(CryptoTensorsError):
    pass


class SignatureInvalid(LoadError):
    pass


class PolicyDenied(LoadError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class MissingEncryptionRecord(LoadError):
    """Encryption metadata references a tensor the table does not contain."""


class UnknownTensor(LoadError):
    pass


class MasterKeyUnavailable(LoadError):
    pass


class PlainFileRejected(LoadError):
    """File carries no crypto metadata and the caller forbade plain files."""


class RangeOutOfBounds(LoadError):
    pass


# ---------------------------------------------------------------------------
# Key broker service
# ---------------------------------------------------------------------------

class KeystoreError(CryptoTensorsError):
    pass


class MalformedKeystore(KeystoreError):
    pass


class BadKeyLength(KeystoreError):
    pass


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

class IoError(CryptoTensorsError):
    pass
