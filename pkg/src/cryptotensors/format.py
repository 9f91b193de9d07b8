"""Container layout: length-prefixed JSON header followed by a flat tensor body.

The file is ``[8-byte LE u64 header_len][header JSON, space-padded][body]``.
Each tensor entry is ``{"dtype": tag, "shape": [ints], "data_offsets": [begin, end]}``
with offsets relative to the body start; ``__metadata__`` is an optional
string-to-string map. Header parsing never touches body bytes, which is what
makes lazy tensor loading possible.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import (
    DuplicateName,
    HeaderTooLarge,
    InvalidDtype,
    LayoutError,
    MalformedJson,
    NameNotUtf8,
    Overflow,
    SignaturePresent,
    TruncatedFile,
)

MAX_HEADER_LEN = 100 * 1024 * 1024  # hostile-prefix guard
METADATA_KEY = "__metadata__"
SIGNATURE_KEY = "__signature__"
RESERVED_METADATA_KEYS = (
    "__crypto_keys__",
    "__encryption__",
    "__policy__",
    "__signature__",
)
_U64_MAX = 2**64 - 1


class Dtype(str, enum.Enum):
    """Supported element types. Body bytes are opaque little-endian payloads."""

    BOOL = "BOOL"
    U8 = "U8"
    I8 = "I8"
    I16 = "I16"
    U16 = "U16"
    F16 = "F16"
    BF16 = "BF16"
    F32 = "F32"
    U32 = "U32"
    I32 = "I32"
    F64 = "F64"
    U64 = "U64"
    I64 = "I64"

    @property
    def element_size(self) -> int:
        return _DTYPE_SIZES[self]


_DTYPE_SIZES = {
    Dtype.BOOL: 1,
    Dtype.U8: 1,
    Dtype.I8: 1,
    Dtype.I16: 2,
    Dtype.U16: 2,
    Dtype.F16: 2,
    Dtype.BF16: 2,
    Dtype.F32: 4,
    Dtype.U32: 4,
    Dtype.I32: 4,
    Dtype.F64: 8,
    Dtype.U64: 8,
    Dtype.I64: 8,
}


def parse_dtype(tag: str) -> Dtype:
    """Map a dtype tag string to a Dtype; unknown tags are a hard error."""
    try:
        return Dtype(tag)
    except ValueError:
        raise InvalidDtype(f"unknown dtype tag {tag!r}") from None


def tensor_byte_len(dtype: Dtype, shape: Sequence[int]) -> int:
    """Byte length of a tensor: element_size x product(shape), 0 if any dim is 0."""
    n = 1
    for dim in shape:
        if dim < 0:
            raise MalformedJson(f"negative dimension {dim} in shape")
        n *= dim
        if n > _U64_MAX:
            raise Overflow("element count exceeds 64-bit range")
    nbytes = n * dtype.element_size
    if nbytes > _U64_MAX:
        raise Overflow("byte length exceeds 64-bit range")
    return nbytes


@dataclass(frozen=True)
class TensorInfo:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return tensor_byte_len(self.dtype, self.shape)


@dataclass(frozen=True)
class Header:
    """Parsed container header: tensor table (ascending begin offset) plus
    the ``__metadata__`` string map."""

    tensors: tuple[TensorInfo, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def tensor(self, name: str) -> TensorInfo:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def by_name(self) -> dict[str, TensorInfo]:
        return {t.name: t for t in self.tensors}

    def with_metadata(self, metadata: Mapping[str, str]) -> "Header":
        return Header(tensors=self.tensors, metadata=dict(metadata))


def _check_name_utf8(name: str) -> bytes:
    try:
        return name.encode("utf-8")
    except UnicodeEncodeError:
        raise NameNotUtf8(f"tensor name {name!r} is not valid UTF-8") from None


def _pairs_reject_duplicates(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise MalformedJson(f"duplicate key {key!r} in header JSON")
        obj[key] = value
    return obj


def header_from_json_obj(obj) -> Header:
    """Build a Header from decoded header JSON. Structural validation only;
    use validate_layout for offset coverage."""
    if not isinstance(obj, dict):
        raise MalformedJson("header JSON must be an object")
    metadata: dict[str, str] = {}
    tensors: list[TensorInfo] = []
    for name, entry in obj.items():
        _check_name_utf8(name)
        if name == METADATA_KEY:
            if not isinstance(entry, dict):
                raise MalformedJson("__metadata__ must be an object")
            for k, v in entry.items():
                if not isinstance(k, str) or not isinstance(v, str):
                    raise MalformedJson("__metadata__ entries must map strings to strings")
                _check_name_utf8(k)
                _check_name_utf8(v)
            metadata = dict(entry)
            continue
        if not isinstance(entry, dict):
            raise MalformedJson(f"tensor entry {name!r} must be an object")
        if set(entry) != {"dtype", "shape", "data_offsets"}:
            raise MalformedJson(f"tensor entry {name!r} has unexpected structure")
        if not isinstance(entry["dtype"], str):
            raise MalformedJson(f"tensor entry {name!r}: dtype must be a string")
        dtype = parse_dtype(entry["dtype"])
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise MalformedJson(f"tensor entry {name!r}: shape must be a list of non-negative ints")
        offsets = entry["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
        ):
            raise MalformedJson(f"tensor entry {name!r}: data_offsets must be [begin, end]")
        tensors.append(
            TensorInfo(name=name, dtype=dtype, shape=tuple(shape), data_offsets=(offsets[0], offsets[1]))
        )
    tensors.sort(key=lambda t: (t.data_offsets[0], t.data_offsets[1], t.name))
    return Header(tensors=tuple(tensors), metadata=metadata)


def validate_layout(header: Header, body_length: int) -> None:
    """Check that tensor ranges tile [0, body_length) exactly, sizes matching
    dtype x shape. Raises LayoutError otherwise."""
    cursor = 0
    for t in header.tensors:
        begin, end = t.data_offsets
        span = end - begin
        if span != t.nbytes:
            raise LayoutError(
                "size_mismatch",
                f"tensor {t.name!r}: offsets span {span} bytes, dtype x shape needs {t.nbytes}",
            )
        if end > body_length:
            raise LayoutError(
                "out_of_bounds",
                f"tensor {t.name!r}: end offset {end} exceeds body length {body_length}",
            )
        if begin < cursor:
            raise LayoutError("overlap", f"tensor {t.name!r}: begin {begin} overlaps previous range")
        if begin > cursor:
            raise LayoutError("gap", f"tensor {t.name!r}: gap between {cursor} and {begin}")
        cursor = end
    if cursor != body_length:
        raise LayoutError("gap", f"body bytes [{cursor}, {body_length}) not covered by any tensor")


def parse_header_bytes(raw: bytes, body_length: int) -> Header:
    """Parse and layout-validate header JSON bytes against a known body length."""
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedJson(f"header is not valid UTF-8: {e}") from None
    try:
        obj = json.loads(text, object_pairs_hook=_pairs_reject_duplicates)
    except MalformedJson:
        raise
    except json.JSONDecodeError as e:
        raise MalformedJson(f"header is not valid JSON: {e}") from None
    header = header_from_json_obj(obj)
    validate_layout(header, body_length)
    return header


def parse_header(file_bytes, max_header_len: int = MAX_HEADER_LEN) -> tuple[Header, tuple[int, int]]:
    """Parse and validate the header of a complete file image.

    Returns the Header and the [begin, end) byte range of the body. Only the
    length prefix and header region are read; body bytes are never touched.
    """
    total = len(file_bytes)
    if total < 8:
        raise TruncatedFile(f"file is {total} bytes, need at least 8 for the length prefix")
    (header_len,) = struct.unpack("<Q", bytes(file_bytes[0:8]))
    if header_len > max_header_len:
        raise HeaderTooLarge(f"declared header length {header_len} exceeds {max_header_len}")
    body_begin = 8 + header_len
    if total < body_begin:
        raise TruncatedFile(f"file is {total} bytes, header declares {header_len}")
    header = parse_header_bytes(bytes(file_bytes[8:body_begin]), total - body_begin)
    return header, (body_begin, total)


def _header_json_obj(header: Header) -> dict:
    obj: dict = {}
    if header.metadata:
        obj[METADATA_KEY] = dict(header.metadata)
    for t in header.tensors:
        obj[t.name] = {
            "dtype": t.dtype.value,
            "shape": list(t.shape),
            "data_offsets": list(t.data_offsets),
        }
    return obj


def encode_header(header: Header) -> bytes:
    """Serialize a Header to its on-disk form: length prefix plus JSON padded
    with spaces so the body starts on an 8-byte boundary."""
    for t in header.tensors:
        _check_name_utf8(t.name)
    payload = json.dumps(_header_json_obj(header), ensure_ascii=False, separators=(",", ":")).encode(
        "utf-8"
    )
    pad = (-(8 + len(payload))) % 8
    payload += b" " * pad
    if len(payload) > MAX_HEADER_LEN:
        raise HeaderTooLarge(f"encoded header is {len(payload)} bytes")
    return struct.pack("<Q", len(payload)) + payload


def assign_offsets(
    tensors: Iterable[tuple[str, Dtype, Sequence[int]]],
) -> list[TensorInfo]:
    """Lay tensors out contiguously in lexicographic (UTF-8 byte) name order."""
    seen: set[str] = set()
    entries = []
    for name, dtype, shape in tensors:
        encoded = _check_name_utf8(name)
        if name in seen:
            raise DuplicateName(f"duplicate tensor name {name!r}")
        if name == METADATA_KEY:
            raise DuplicateName(f"{METADATA_KEY} is reserved and cannot name a tensor")
        seen.add(name)
        entries.append((encoded, name, dtype, tuple(shape)))
    entries.sort(key=lambda e: e[0])
    infos = []
    cursor = 0
    for _, name, dtype, shape in entries:
        nbytes = tensor_byte_len(dtype, shape)
        infos.append(TensorInfo(name=name, dtype=dtype, shape=shape, data_offsets=(cursor, cursor + nbytes)))
        cursor += nbytes
    return infos


def build_header(
    tensors: Iterable[tuple[str, Dtype, Sequence[int]]],
    metadata: Mapping[str, str] | None = None,
) -> tuple[bytes, dict[str, tuple[int, int]]]:
    """Assign offsets and emit header bytes; returns (bytes, name -> offsets)."""
    infos = assign_offsets(tensors)
    header = Header(tensors=tuple(infos), metadata=dict(metadata or {}))
    return encode_header(header), {t.name: t.data_offsets for t in infos}


def canonicalize(header: Header) -> bytes:
    """Deterministic signature payload for a header.

    Object keys are sorted byte-wise, whitespace is dropped, integers use
    minimal decimal form, and strings escape only what JSON requires. The
    result is a function of the abstract header alone, so padding and key
    order in the stored file never affect it.
    """
    if SIGNATURE_KEY in header.metadata:
        raise SignaturePresent("strip __signature__ before canonicalizing")
    for t in header.tensors:
        _check_name_utf8(t.name)
    return json.dumps(
        _header_json_obj(header), ensure_ascii=False, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")


def strip_signature(header: Header) -> tuple[Header, str | None]:
    """Split a header into (header-without-signature, signature value or None)."""
    if SIGNATURE_KEY not in header.metadata:
        return header, None
    md = {k: v for k, v in header.metadata.items() if k != SIGNATURE_KEY}
    return Header(tensors=header.tensors, metadata=md), header.metadata[SIGNATURE_KEY]
