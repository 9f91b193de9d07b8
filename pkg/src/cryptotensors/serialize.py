"""Write container files: lay out tensors, encrypt the selected ones with
fresh per-tensor DEKs, wrap the DEKs under the master key, sign the header,
and emit.

Ciphertext is written at exactly the offsets the plaintext would occupy, so
the tensor table of an encrypted file is byte-identical to its plain
counterpart; all growth is header metadata.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

from . import crypto, format as fmt, meta
from .crypto import MasterKey, RandomFn, SignKeyPair
from .errors import (
    IoError,
    MetadataKeyCollision,
    SerializeError,
    SizeMismatch,
    UnknownTensorInSelection,
)
from .keys import CryptoKeysMeta, b64encode
from .policy import PolicyDoc

ENCRYPT_ALL = "all"
ENCRYPT_NONE = "none"

# name -> (dtype, shape, little-endian bytes)
TensorMap = Mapping[str, tuple[Union[fmt.Dtype, str], Sequence[int], bytes]]


@dataclass
class SerializeConfig:
    """Everything needed to produce an encrypted, signed container."""

    master_key: MasterKey
    sign_keypair: SignKeyPair
    keys_meta: CryptoKeysMeta
    enc_alg: str = crypto.ENC_ALG
    encrypt: Union[str, Sequence[str]] = ENCRYPT_ALL
    policy: PolicyDoc = field(default_factory=PolicyDoc)
    extra_metadata: Mapping[str, str] = field(default_factory=dict)
    rand: RandomFn = crypto.os_random

    def __post_init__(self):
        if self.enc_alg != crypto.ENC_ALG:
            raise ValueError(f"unsupported encryption algorithm {self.enc_alg!r}")
        if isinstance(self.encrypt, str) and self.encrypt not in (ENCRYPT_ALL, ENCRYPT_NONE):
            raise ValueError(f"encrypt must be 'all', 'none' or a list of names, got {self.encrypt!r}")
        for key in self.extra_metadata:
            if key in fmt.RESERVED_METADATA_KEYS:
                raise MetadataKeyCollision(f"metadata key {key!r} is reserved")


def _normalize_tensors(tensors: TensorMap) -> list[tuple[str, fmt.Dtype, tuple[int, ...], bytes]]:
    out = []
    for name, (dtype, shape, data) in tensors.items():
        if isinstance(dtype, str):
            dtype = fmt.parse_dtype(dtype)
        shape = tuple(int(d) for d in shape)
        data = bytes(data)
        expected = fmt.tensor_byte_len(dtype, shape)
        if len(data) != expected:
            raise SizeMismatch(
                f"tensor {name!r}: got {len(data)} bytes, dtype x shape needs {expected}"
            )
        out.append((name, dtype, shape, data))
    return out


def _selection_names(config: SerializeConfig, names: Sequence[str]) -> set[str]:
    if isinstance(config.encrypt, str):
        if config.encrypt == ENCRYPT_ALL:
            return set(names)
        return set()
    selected = set(config.encrypt)
    unknown = selected - set(names)
    if unknown:
        raise UnknownTensorInSelection(
            f"selection names unknown tensors: {', '.join(sorted(unknown))}"
        )
    return selected


def _merge_metadata(
    config: SerializeConfig | None, metadata: Mapping[str, str] | None
) -> dict[str, str]:
    merged: dict[str, str] = {}
    sources = [metadata or {}]
    if config is not None:
        sources.append(config.extra_metadata)
    for source in sources:
        for key, value in source.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise SerializeError("metadata must map strings to strings")
            if key in fmt.RESERVED_METADATA_KEYS:
                raise MetadataKeyCollision(f"metadata key {key!r} is reserved")
            if key in merged and merged[key] != value:
                raise MetadataKeyCollision(f"metadata key {key!r} supplied twice with different values")
            merged[key] = value
    return merged


def serialize_bytes(
    tensors: TensorMap,
    config: SerializeConfig | None = None,
    metadata: Mapping[str, str] | None = None,
) -> bytes:
    """Serialize to an in-memory file image. Without a config this produces a
    plain container with no crypto metadata."""
    normalized = _normalize_tensors(tensors)
    infos = fmt.assign_offsets([(n, d, s) for n, d, s, _ in normalized])
    data_by_name = {n: data for n, _, _, data in normalized}
    user_metadata = _merge_metadata(config, metadata)

    if config is None:
        header = fmt.Header(tensors=tuple(infos), metadata=user_metadata)
        body = b"".join(data_by_name[t.name] for t in infos)
        return fmt.encode_header(header) + body

    selected = _selection_names(config, [t.name for t in infos])
    records: dict[str, meta.TensorEncryptionRecord] = {}
    chunks: list[bytes] = []
    for info in infos:
        data = data_by_name[info.name]
        if info.name not in selected:
            chunks.append(data)
            continue
        aad = info.name.encode("utf-8")
        dek = crypto.generate_dek(config.rand)
        iv = crypto.generate_iv(config.rand)
        ciphertext, tag = crypto.aead_encrypt(dek, iv, aad, data)
        wrapped = crypto.wrap_dek(config.master_key.bytes, dek, aad, config.rand)
        records[info.name] = meta.TensorEncryptionRecord(
            alg=config.enc_alg,
            iv=iv,
            tag=tag,
            wrapped_key=wrapped.wrapped_key,
            key_iv=wrapped.key_iv,
            key_tag=wrapped.key_tag,
        )
        chunks.append(ciphertext)

    full_metadata = dict(user_metadata)
    full_metadata[meta.CRYPTO_KEYS_KEY] = meta.dump_embedded(config.keys_meta.to_json_obj())
    if records:
        full_metadata[meta.ENCRYPTION_KEY] = meta.encryption_records_to_string(records)
    if not config.policy.is_empty():
        full_metadata[meta.POLICY_KEY] = meta.dump_embedded(config.policy.to_json_obj())

    unsigned = fmt.Header(tensors=tuple(infos), metadata=full_metadata)
    signature = crypto.sign_header(config.sign_keypair, fmt.canonicalize(unsigned))
    full_metadata[meta.SIGNATURE_KEY] = b64encode(signature)
    header = fmt.Header(tensors=tuple(infos), metadata=full_metadata)
    return fmt.encode_header(header) + b"".join(chunks)


def serialize_file(
    tensors: TensorMap,
    path,
    config: SerializeConfig | None = None,
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Serialize to disk; writes a temp file and renames it into place so a
    failed write never leaves a partial container behind."""
    blob = serialize_bytes(tensors, config, metadata)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    try:
        fd, tmp_path = tempfile.mkstemp(prefix=".ct-", dir=directory)
    except OSError as e:
        raise IoError(f"cannot create temporary file next to {path!r}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp_path, path)
    except OSError as e:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise IoError(f"cannot write {path!r}: {e}") from e
