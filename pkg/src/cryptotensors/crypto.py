"""Cryptographic primitives: AES-256-GCM for tensors and key wrapping,
Ed25519 for header signatures.

Tags and IVs travel in the header, never inline in the body, so ciphertext
occupies exactly the byte range the plaintext would. Randomness is injectable
for reproducible output; the default source is the OS CSPRNG.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationFailed, MalformedSignature, RandomnessUnavailable

DEK_LEN = 32
IV_LEN = 12
TAG_LEN = 16
MASTER_KEY_LEN = 32
SIGNATURE_LEN = 64
PUBLIC_KEY_LEN = 32

ENC_ALG = "A256GCM"
SIGN_ALG = "Ed25519"

RandomFn = Callable[[int], bytes]


def os_random(n: int) -> bytes:
    try:
        return secrets.token_bytes(n)
    except OSError as e:  # pragma: no cover - no entropy source
        raise RandomnessUnavailable(str(e)) from e


def _draw(rand: RandomFn, n: int) -> bytes:
    out = rand(n)
    if not isinstance(out, (bytes, bytearray)) or len(out) != n:
        raise RandomnessUnavailable(f"random source returned {len(out)} bytes, wanted {n}")
    return bytes(out)


def generate_dek(rand: RandomFn = os_random) -> bytes:
    return _draw(rand, DEK_LEN)


def generate_iv(rand: RandomFn = os_random) -> bytes:
    return _draw(rand, IV_LEN)


def generate_master_key(rand: RandomFn = os_random) -> bytes:
    return _draw(rand, MASTER_KEY_LEN)


def _require_len(label: str, value: bytes, expected: int) -> None:
    if len(value) != expected:
        raise ValueError(f"{label} must be {expected} bytes, got {len(value)}")


def aead_encrypt(key: bytes, iv: bytes, aad: bytes, plaintext) -> tuple[bytes, bytes]:
    """AES-256-GCM encrypt. Returns (ciphertext, 16-byte tag); ciphertext has
    the same length as the plaintext."""
    _require_len("key", key, DEK_LEN)
    _require_len("iv", iv, IV_LEN)
    out = AESGCM(key).encrypt(iv, bytes(plaintext), bytes(aad) if aad else None)
    return out[:-TAG_LEN], out[-TAG_LEN:]


def aead_decrypt(key: bytes, iv: bytes, aad: bytes, ciphertext, tag: bytes) -> bytes:
    """AES-256-GCM decrypt; all-or-nothing. Raises AuthenticationFailed on any
    key/iv/aad/tag mismatch without exposing partial plaintext."""
    _require_len("key", key, DEK_LEN)
    _require_len("iv", iv, IV_LEN)
    _require_len("tag", tag, TAG_LEN)
    try:
        return AESGCM(key).decrypt(iv, bytes(ciphertext) + bytes(tag), bytes(aad) if aad else None)
    except InvalidTag:
        raise AuthenticationFailed("AEAD authentication failed") from None


@dataclass(frozen=True)
class WrappedDek:
    wrapped_key: bytes  # 32-byte ciphertext of the DEK
    key_iv: bytes
    key_tag: bytes


def wrap_dek(master_key: bytes, dek: bytes, aad: bytes, rand: RandomFn = os_random) -> WrappedDek:
    """Encrypt a DEK under the master key with a fresh IV."""
    _require_len("master key", master_key, MASTER_KEY_LEN)
    _require_len("dek", dek, DEK_LEN)
    key_iv = generate_iv(rand)
    wrapped, key_tag = aead_encrypt(master_key, key_iv, aad, dek)
    return WrappedDek(wrapped_key=wrapped, key_iv=key_iv, key_tag=key_tag)


def unwrap_dek(master_key: bytes, wrapped_key: bytes, key_iv: bytes, key_tag: bytes, aad: bytes) -> bytes:
    """Recover a DEK; raises AuthenticationFailed on wrong master key, wrong
    aad, or a tampered wrap."""
    _require_len("master key", master_key, MASTER_KEY_LEN)
    _require_len("wrapped key", wrapped_key, DEK_LEN)
    return aead_decrypt(master_key, key_iv, aad, wrapped_key, key_tag)


# ---------------------------------------------------------------------------
# Header signatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignKeyPair:
    """Ed25519 keypair; ``private`` is the 32-byte seed."""

    private: bytes
    public: bytes
    algorithm: str = SIGN_ALG

    @classmethod
    def generate(cls, rand: RandomFn = os_random) -> "SignKeyPair":
        return cls.from_seed(_draw(rand, 32))

    @classmethod
    def from_seed(cls, seed: bytes) -> "SignKeyPair":
        _require_len("seed", seed, 32)
        sk = Ed25519PrivateKey.from_private_bytes(seed)
        pub = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return cls(private=seed, public=pub)


@dataclass(frozen=True)
class MasterKey:
    bytes: bytes
    kid: str

    def __post_init__(self):
        _require_len("master key", self.bytes, MASTER_KEY_LEN)


def sign_header(keypair: SignKeyPair, canonical_bytes: bytes) -> bytes:
    """Detached Ed25519 signature (64 bytes) over canonical header bytes."""
    return Ed25519PrivateKey.from_private_bytes(keypair.private).sign(canonical_bytes)


def verify_header(public: bytes, canonical_bytes: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid for exactly these bytes. Structural
    problems (wrong lengths) raise MalformedSignature instead of returning
    False so callers can distinguish garbage from forgery."""
    if not isinstance(public, (bytes, bytearray)) or len(public) != PUBLIC_KEY_LEN:
        raise MalformedSignature(f"public key must be {PUBLIC_KEY_LEN} bytes")
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != SIGNATURE_LEN:
        raise MalformedSignature(f"signature must be {SIGNATURE_LEN} bytes")
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(signature), canonical_bytes)
        return True
    except InvalidSignature:
        return False


def key_id(key_bytes: bytes) -> str:
    """Key identifier: hex of the first 8 bytes of SHA-256 of the key."""
    return hashlib.sha256(key_bytes).digest()[:8].hex()
