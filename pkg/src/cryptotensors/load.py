"""Open, verify and lazily decrypt container files.

Verification order at open() is fixed: header signature, then local policy,
then master-key resolution. DEKs are unwrapped lazily on first tensor access
and each encrypted tensor is decrypted at most once per handle, with the
plaintext cached for later accesses.
"""

from __future__ import annotations

import builtins
import mmap
import os
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Mapping, Optional, Sequence

from . import crypto, format as fmt, meta, policy as pol
from .errors import (
    HeaderTooLarge,
    KbsDenied,
    MalformedSignature,
    MasterKeyUnavailable,
    MissingEncryptionRecord,
    PlainFileRejected,
    PolicyDenied,
    RangeOutOfBounds,
    SignatureInvalid,
    TruncatedFile,
    UnknownTensor,
)
from .keys import CryptoKeysMeta, ResolutionContext, b64decode, resolve_key
from .meta import TensorEncryptionRecord


@dataclass
class OpenOptions:
    """Loader configuration: trust roots, measurement source, clock, and
    whether plain (unprotected) files are acceptable."""

    resolution: ResolutionContext = field(default_factory=ResolutionContext)
    measurement_provider: object = field(default_factory=pol.DefaultMeasurementProvider)
    clock: Callable[[], datetime] = pol.utcnow
    allow_plain: bool = True


class LoadHandle:
    """An open container: parsed header, memory-mapped body, resolved master
    key, and the per-tensor plaintext cache with decrypt counters.

    Safe to share across threads for reads; first-access decryption is
    serialized per tensor so each tensor is decrypted at most once.
    """

    def __init__(
        self,
        path: str,
        header: fmt.Header,
        file_obj,
        mapped,
        body_range: tuple[int, int],
        master_key: Optional[bytes],
        enc_records: Mapping[str, TensorEncryptionRecord],
        keys_meta: Optional[CryptoKeysMeta],
        options: OpenOptions,
    ):
        self.path = path
        self.header = header
        self.options = options
        self.keys_meta = keys_meta
        self._file = file_obj
        self._mapped = mapped
        self._view = memoryview(mapped) if mapped is not None else memoryview(b"")
        self._body_begin, self._body_end = body_range
        self._master_key = master_key
        self._records = dict(enc_records)
        self._by_name = header.by_name()
        self._cache: dict[str, bytes] = {}
        self._counts: dict[str, int] = {name: 0 for name in self._records}
        self._locks = {name: threading.Lock() for name in self._records}
        self._closed = False
        self.body_bytes_read = 0  # instrumentation: body bytes handed out

    # -- header-only views ---------------------------------------------------

    def names(self) -> list[str]:
        return self.header.names()

    def tensor_info(self, name: str) -> fmt.TensorInfo:
        info = self._by_name.get(name)
        if info is None:
            raise UnknownTensor(f"no tensor named {name!r}")
        return info

    def metadata(self) -> dict[str, str]:
        """User metadata with the reserved crypto fields filtered out."""
        return {
            k: v
            for k, v in self.header.metadata.items()
            if k not in fmt.RESERVED_METADATA_KEYS
        }

    def raw_metadata(self) -> dict[str, str]:
        """The complete metadata map, reserved fields included."""
        return dict(self.header.metadata)

    def is_encrypted(self, name: str) -> bool:
        self.tensor_info(name)
        return name in self._records

    @property
    def encrypted_names(self) -> list[str]:
        return sorted(self._records)

    @property
    def master_key_present(self) -> bool:
        return self._master_key is not None

    # -- body access -----------------------------------------------------

    def _body_slice(self, begin: int, end: int) -> memoryview:
        self.body_bytes_read += end - begin
        return self._view[self._body_begin + begin : self._body_begin + end]

    def _decrypt(self, name: str, info: fmt.TensorInfo, record: TensorEncryptionRecord) -> bytes:
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        with self._locks[name]:
            cached = self._cache.get(name)
            if cached is not None:
                return cached
            if self._master_key is None:
                raise MasterKeyUnavailable(
                    f"tensor {name!r} is encrypted but no master key was resolved"
                )
            aad = name.encode("utf-8")
            dek = crypto.unwrap_dek(
                self._master_key, record.wrapped_key, record.key_iv, record.key_tag, aad
            )
            begin, end = info.data_offsets
            plaintext = crypto.aead_decrypt(
                dek, record.iv, aad, self._body_slice(begin, end), record.tag
            )
            self._cache[name] = plaintext
            self._counts[name] += 1
            return plaintext

    def get_tensor(self, name: str):
        """Returns (dtype, shape, buffer). Unencrypted tensors come back as a
        zero-copy view of the mapped file; encrypted tensors decrypt once and
        return the cached plaintext on every later call."""
        info = self.tensor_info(name)
        record = self._records.get(name)
        begin, end = info.data_offsets
        if record is None:
            return info.dtype, info.shape, self._body_slice(begin, end)
        return info.dtype, info.shape, self._decrypt(name, info, record)

    def get_slice(self, name: str, ranges: Sequence[tuple[int, int]]):
        """Slice by per-dimension half-open [start, stop) intervals; omitted
        trailing dimensions are taken whole. Encrypted tensors decrypt fully
        first (GCM is not seekable), then slice from the cache."""
        info = self.tensor_info(name)
        shape = info.shape
        if len(ranges) > len(shape):
            raise RangeOutOfBounds(f"{len(ranges)} ranges for a rank-{len(shape)} tensor")
        norm: list[tuple[int, int]] = []
        for i, dim in enumerate(shape):
            if i < len(ranges):
                start, stop = ranges[i]
                if not (0 <= start <= stop <= dim):
                    raise RangeOutOfBounds(
                        f"range [{start}, {stop}) invalid for dimension {i} of size {dim}"
                    )
                norm.append((int(start), int(stop)))
            else:
                norm.append((0, dim))
        sliced_shape = tuple(stop - start for start, stop in norm)

        record = self._records.get(name)
        if record is not None:
            buf = self._decrypt(name, info, record)
            data = _gather(memoryview(buf), shape, norm, info.dtype.element_size)
        else:
            begin, end = info.data_offsets
            view = self._view[self._body_begin + begin : self._body_begin + end]
            data = _gather(view, shape, norm, info.dtype.element_size)
            self.body_bytes_read += len(data)
        return info.dtype, sliced_shape, data

    def decrypt_stats(self) -> dict[str, int]:
        """Snapshot of per-tensor decrypt counters (encrypted tensors only)."""
        return dict(self._counts)

    def cache_bytes(self) -> int:
        """Total plaintext bytes currently held by the decrypt-once cache."""
        return sum(len(b) for b in self._cache.values())

    def release(self, name: str) -> None:
        """Drop a cached plaintext buffer; a later access decrypts again."""
        self.tensor_info(name)
        self._cache.pop(name, None)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._cache.clear()
        self._view.release()
        if self._mapped is not None:
            try:
                self._mapped.close()
            except BufferError:
                # zero-copy views handed to callers still reference the map;
                # it is unmapped once the last of them is dropped
                pass
        if self._file is not None:
            self._file.close()

    def __enter__(self) -> "LoadHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _gather(view: memoryview, shape, ranges, element_size: int) -> bytes:
    """Collect the bytes of a rectangular slice from a row-major buffer."""
    if not shape:
        return bytes(view)
    if any(stop == start for start, stop in ranges):
        return b""
    # deepest dimension whose range is not the whole axis; everything after it
    # is contiguous and copied per run
    last_partial = -1
    for i, (dim, (start, stop)) in enumerate(zip(shape, ranges)):
        if (start, stop) != (0, dim):
            last_partial = i
    if last_partial == -1:
        return bytes(view)
    strides = [element_size] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    run_start, run_stop = ranges[last_partial]
    run_bytes = (run_stop - run_start) * strides[last_partial]
    chunks = []
    outer = ranges[:last_partial]

    def walk(dim_index: int, offset: int) -> None:
        if dim_index == last_partial:
            base = offset + run_start * strides[last_partial]
            chunks.append(view[base : base + run_bytes])
            return
        start, stop = outer[dim_index]
        for idx in range(start, stop):
            walk(dim_index + 1, offset + idx * strides[dim_index])

    walk(0, 0)
    return b"".join(chunks)


def open(path, options: Optional[OpenOptions] = None) -> LoadHandle:  # noqa: A001 - mirrors the io verb
    """Open a container file.

    Plain files (no crypto metadata) yield a handle immediately with no key
    resolution. Encrypted files go through signature verification, local
    policy evaluation and master-key resolution, in that order; tensor bytes
    stay untouched until first access.
    """
    options = options or OpenOptions()
    path = os.fspath(path)
    size = os.stat(path).st_size
    file_obj = builtins.open(path, "rb")
    try:
        # header parse works on plain bytes read up front; the body is only
        # ever touched through the mapping created after validation
        prefix = file_obj.read(8)
        if len(prefix) < 8:
            raise TruncatedFile(f"file is {size} bytes, need at least 8 for the length prefix")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > fmt.MAX_HEADER_LEN:
            raise HeaderTooLarge(f"declared header length {header_len} exceeds {fmt.MAX_HEADER_LEN}")
        raw_header_bytes = file_obj.read(header_len)
        if len(raw_header_bytes) < header_len:
            raise TruncatedFile(f"file is {size} bytes, header declares {header_len}")
        body_range = (8 + header_len, size)
        header = fmt.parse_header_bytes(raw_header_bytes, size - 8 - header_len)
        mapped = mmap.mmap(file_obj.fileno(), 0, access=mmap.ACCESS_READ) if size > 0 else None
    except BaseException:
        file_obj.close()
        raise
    try:
        if meta.CRYPTO_KEYS_KEY not in header.metadata:
            if not options.allow_plain:
                raise PlainFileRejected(f"{path!r} carries no crypto metadata")
            return LoadHandle(
                path, header, file_obj, mapped, body_range, None, {}, None, options
            )

        keys_meta = CryptoKeysMeta.from_json_obj(
            meta.load_embedded(header.metadata[meta.CRYPTO_KEYS_KEY], meta.CRYPTO_KEYS_KEY)
        )

        # 1. signature
        stripped, signature_b64 = fmt.strip_signature(header)
        if signature_b64 is None:
            raise SignatureInvalid("encrypted file carries no __signature__")
        try:
            signature = b64decode(signature_b64, meta.SIGNATURE_KEY)
        except ValueError:
            raise SignatureInvalid("__signature__ is not valid base64") from None
        sign_key = resolve_key(keys_meta.sign, options.resolution, purpose="sign")
        canonical = fmt.canonicalize(stripped)
        try:
            if not crypto.verify_header(sign_key, canonical, signature):
                raise SignatureInvalid("header signature verification failed")
        except MalformedSignature as e:
            raise SignatureInvalid(str(e)) from None

        # 2. local policy
        policy_doc = pol.PolicyDoc()
        if meta.POLICY_KEY in header.metadata:
            policy_doc = pol.PolicyDoc.from_json_obj(
                meta.load_embedded(header.metadata[meta.POLICY_KEY], meta.POLICY_KEY)
            )
        enc_records = {}
        if meta.ENCRYPTION_KEY in header.metadata:
            enc_records = meta.encryption_records_from_string(
                header.metadata[meta.ENCRYPTION_KEY]
            )
        known = set(header.names())
        orphans = set(enc_records) - known
        if orphans:
            raise MissingEncryptionRecord(
                f"encryption records reference unknown tensors: {', '.join(sorted(orphans))}"
            )

        needs_kbs = bool(enc_records) and keys_meta.enc.scheme == "kbs"
        measurements: dict[str, str] = {}
        if policy_doc.local is not None or needs_kbs:
            measurements = pol.collect_measurements(options.measurement_provider)
        decision = pol.decide(policy_doc.local, measurements, options.clock())
        if not decision.allow:
            raise PolicyDenied(decision.reason)

        # 3. master key (only when something is actually encrypted)
        master_key = None
        if enc_records:
            try:
                master_key = resolve_key(
                    keys_meta.enc,
                    options.resolution,
                    purpose="enc",
                    kbs_payload=(raw_header_bytes, measurements),
                )
            except KbsDenied as e:
                raise PolicyDenied(e.reason) from e

        return LoadHandle(
            path,
            header,
            file_obj,
            mapped,
            body_range,
            master_key,
            enc_records,
            keys_meta,
            options,
        )
    except BaseException:
        if mapped is not None:
            mapped.close()
        file_obj.close()
        raise
