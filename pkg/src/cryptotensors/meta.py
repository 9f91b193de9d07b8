"""Wire schemas for the reserved metadata fields.

The four reserved keys live inside ``__metadata__`` as string values so stock
readers of the base format still parse the header; three of them hold JSON
documents serialized to strings, the fourth the base64 header signature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import crypto
from .errors import MalformedJson
from .keys import b64decode, b64encode

CRYPTO_KEYS_KEY = "__crypto_keys__"
ENCRYPTION_KEY = "__encryption__"
POLICY_KEY = "__policy__"
SIGNATURE_KEY = "__signature__"


@dataclass(frozen=True)
class TensorEncryptionRecord:
    """Per-tensor crypto envelope: tensor IV/tag plus the wrapped DEK and the
    IV/tag of the wrap. All binary fields are base64 on the wire."""

    alg: str
    iv: bytes
    tag: bytes
    wrapped_key: bytes
    key_iv: bytes
    key_tag: bytes

    def __post_init__(self):
        expected = {
            "iv": crypto.IV_LEN,
            "tag": crypto.TAG_LEN,
            "wrapped_key": crypto.DEK_LEN,
            "key_iv": crypto.IV_LEN,
            "key_tag": crypto.TAG_LEN,
        }
        for name, want in expected.items():
            got = len(getattr(self, name))
            if got != want:
                raise MalformedJson(f"encryption record field {name} is {got} bytes, expected {want}")
        if self.alg != crypto.ENC_ALG:
            raise MalformedJson(f"unsupported encryption algorithm {self.alg!r}")

    def to_json_obj(self) -> dict:
        return {
            "alg": self.alg,
            "iv": b64encode(self.iv),
            "tag": b64encode(self.tag),
            "wrapped_key": b64encode(self.wrapped_key),
            "key_iv": b64encode(self.key_iv),
            "key_tag": b64encode(self.key_tag),
        }

    @classmethod
    def from_json_obj(cls, obj) -> "TensorEncryptionRecord":
        if not isinstance(obj, dict):
            raise MalformedJson("encryption record must be an object")
        fields = {}
        for name in ("alg", "iv", "tag", "wrapped_key", "key_iv", "key_tag"):
            value = obj.get(name)
            if not isinstance(value, str):
                raise MalformedJson(f"encryption record is missing field {name}")
            fields[name] = value
        try:
            return cls(
                alg=fields["alg"],
                iv=b64decode(fields["iv"], "iv"),
                tag=b64decode(fields["tag"], "tag"),
                wrapped_key=b64decode(fields["wrapped_key"], "wrapped_key"),
                key_iv=b64decode(fields["key_iv"], "key_iv"),
                key_tag=b64decode(fields["key_tag"], "key_tag"),
            )
        except ValueError as e:
            raise MalformedJson(str(e)) from None


def dump_embedded(obj) -> str:
    """Serialize a reserved-field document to its string form, deterministically."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def load_embedded(text: str, field_name: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"{field_name} is not valid JSON: {e}") from None


def encryption_records_to_string(records: dict[str, TensorEncryptionRecord]) -> str:
    return dump_embedded({name: rec.to_json_obj() for name, rec in sorted(records.items())})


def encryption_records_from_string(text: str) -> dict[str, TensorEncryptionRecord]:
    obj = load_embedded(text, ENCRYPTION_KEY)
    if not isinstance(obj, dict):
        raise MalformedJson(f"{ENCRYPTION_KEY} must be a JSON object")
    return {name: TensorEncryptionRecord.from_json_obj(rec) for name, rec in obj.items()}
