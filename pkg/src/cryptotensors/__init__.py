"""Encrypted tensor containers on a Safetensors-compatible layout.

Per-tensor AES-256-GCM with wrapped data-encryption keys, Ed25519-signed
headers, embedded local/remote policies, and automatic key resolution from
file, HTTP(S) or key-broker sources. Tags and IVs live in the header, so
encrypted and plain files share identical tensor offsets and lazy loading
keeps working.
"""

from .crypto import MasterKey, SignKeyPair, key_id
from .errors import CryptoTensorsError
from .format import Dtype, Header, TensorInfo
from .keys import (
    CryptoKeysMeta,
    KeyRef,
    ResolutionContext,
    default_keys_meta,
    keys_meta_from_files,
)
from .load import LoadHandle, OpenOptions, open
from .policy import Decision, PolicyDoc, PolicyText
from .serialize import SerializeConfig, serialize_bytes, serialize_file

__version__ = "0.1.0"

__all__ = [
    "CryptoKeysMeta",
    "CryptoTensorsError",
    "Decision",
    "Dtype",
    "Header",
    "KeyRef",
    "LoadHandle",
    "MasterKey",
    "OpenOptions",
    "PolicyDoc",
    "PolicyText",
    "ResolutionContext",
    "SerializeConfig",
    "SignKeyPair",
    "TensorInfo",
    "default_keys_meta",
    "key_id",
    "keys_meta_from_files",
    "open",
    "serialize_bytes",
    "serialize_file",
]
