"""JWK-style key references and key resolution across file / http(s) / kbs
schemes, including the key-broker client protocol.

Trust model: signing keys must be pinned in the resolution context, either by
value or by SHA-256 fingerprint; a key fetched from a location the (not yet
verified) header names is never trusted on its own.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional
from urllib.parse import urlsplit, urlunsplit

from . import crypto
from .errors import (
    KbsDenied,
    KbsSignatureRejected,
    LengthMismatch,
    MalformedKeyRef,
    MalformedResponse,
    NetworkError,
    NotFound,
    UnsupportedScheme,
    UntrustedSigningKey,
)

SUPPORTED_SCHEMES = ("file", "http", "https", "kbs")
CRYPTO_KEYS_VERSION = "1"
KBS_KEY_PATH = "/v1/key"
KBS_HEALTH_PATH = "/v1/health"


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str, what: str = "value") -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception:
        raise ValueError(f"{what} is not valid base64") from None


@dataclass(frozen=True)
class KeyRef:
    """Where to find a key: identifier plus a URI, with optional cert chain.
    x5c blobs are carried and surfaced but not path-validated."""

    kid: str
    uri: str
    alg: str = ""
    kty: str = ""
    x5c: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.kid:
            raise MalformedKeyRef("key reference is missing kid")
        scheme = urlsplit(self.uri).scheme
        if scheme not in SUPPORTED_SCHEMES:
            raise UnsupportedScheme(f"unsupported key URI scheme {scheme!r} in {self.uri!r}")

    @property
    def scheme(self) -> str:
        return urlsplit(self.uri).scheme

    def to_jwk(self) -> dict:
        jwk = {"kid": self.kid, "jku": self.uri}
        if self.alg:
            jwk["alg"] = self.alg
        if self.kty:
            jwk["kty"] = self.kty
        if self.x5c:
            jwk["x5c"] = list(self.x5c)
        return jwk


def parse_key_ref(jwk) -> KeyRef:
    """Parse a JWK-style descriptor (JSON text or decoded object); ``jku``
    maps to the key URI."""
    if isinstance(jwk, str):
        try:
            jwk = json.loads(jwk)
        except json.JSONDecodeError as e:
            raise MalformedKeyRef(f"key reference is not valid JSON: {e}") from None
    if not isinstance(jwk, dict):
        raise MalformedKeyRef("key reference must be a JSON object")
    kid = jwk.get("kid")
    uri = jwk.get("jku")
    if not isinstance(kid, str) or not kid:
        raise MalformedKeyRef("key reference is missing kid")
    if not isinstance(uri, str) or not uri:
        raise MalformedKeyRef("key reference is missing jku")
    x5c = jwk.get("x5c", [])
    if not isinstance(x5c, list) or not all(isinstance(c, str) for c in x5c):
        raise MalformedKeyRef("x5c must be a list of base64 strings")
    alg = jwk.get("alg", "")
    kty = jwk.get("kty", "")
    if not isinstance(alg, str) or not isinstance(kty, str):
        raise MalformedKeyRef("alg and kty must be strings")
    return KeyRef(kid=kid, uri=uri, alg=alg, kty=kty, x5c=tuple(x5c))


@dataclass(frozen=True)
class CryptoKeysMeta:
    """The __crypto_keys__ document: format version plus the master-key and
    signing-key references."""

    enc: KeyRef
    sign: KeyRef
    version: str = CRYPTO_KEYS_VERSION

    def to_json_obj(self) -> dict:
        return {"version": self.version, "enc": self.enc.to_jwk(), "sign": self.sign.to_jwk()}

    @classmethod
    def from_json_obj(cls, obj) -> "CryptoKeysMeta":
        if not isinstance(obj, dict):
            raise MalformedKeyRef("__crypto_keys__ must be a JSON object")
        version = obj.get("version")
        if version != CRYPTO_KEYS_VERSION:
            raise MalformedKeyRef(f"unsupported __crypto_keys__ version {version!r}")
        if "enc" not in obj or "sign" not in obj:
            raise MalformedKeyRef("__crypto_keys__ must carry enc and sign references")
        enc = parse_key_ref(obj["enc"])
        sign = parse_key_ref(obj["sign"])
        # unknown algorithm identifiers are hard errors, never a fallback
        if enc.alg not in ("", crypto.ENC_ALG):
            raise MalformedKeyRef(f"unsupported encryption algorithm {enc.alg!r}")
        if sign.alg not in ("", crypto.SIGN_ALG):
            raise MalformedKeyRef(f"unsupported signature algorithm {sign.alg!r}")
        return cls(enc=enc, sign=sign)


def default_keys_meta(
    master_kid: str, master_uri: str, sign_kid: str, sign_uri: str
) -> CryptoKeysMeta:
    """Conventional key metadata: an AES master key and an Ed25519 signer."""
    return CryptoKeysMeta(
        enc=KeyRef(kid=master_kid, uri=master_uri, alg=crypto.ENC_ALG, kty="oct"),
        sign=KeyRef(kid=sign_kid, uri=sign_uri, alg=crypto.SIGN_ALG, kty="OKP"),
    )


def keys_meta_from_files(
    master_key: bytes, master_path: str, sign_public: bytes, sign_key_path: str
) -> CryptoKeysMeta:
    """Key metadata derived from on-disk key files: kids are hashed from the
    key bytes, URIs point at the files (the public half for signing keys)."""
    if sign_key_path.endswith(".priv"):
        pub_path = sign_key_path[: -len(".priv")] + ".pub"
    else:
        pub_path = sign_key_path + ".pub"
    return default_keys_meta(
        master_kid=crypto.key_id(master_key),
        master_uri=f"file://{os.path.abspath(master_path)}",
        sign_kid=crypto.key_id(sign_public),
        sign_uri=f"file://{os.path.abspath(pub_path)}",
    )


# ---------------------------------------------------------------------------
# KBS wire structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KbsRequest:
    """Key release request: the raw header bytes (signature included) plus the
    client's measurements and the requested key id. Never carries key material."""

    header_b64: str
    measurements: Mapping[str, str]
    kid: str

    def to_json_obj(self) -> dict:
        return {
            "header_b64": self.header_b64,
            "measurements": dict(self.measurements),
            "kid": self.kid,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "KbsRequest":
        if (
            not isinstance(obj, dict)
            or not isinstance(obj.get("header_b64"), str)
            or not isinstance(obj.get("measurements"), dict)
            or not isinstance(obj.get("kid"), str)
            or not obj["kid"]
        ):
            raise MalformedResponse("request must carry header_b64, measurements and kid")
        for k, v in obj["measurements"].items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise MalformedResponse("measurements must map strings to strings")
        return cls(header_b64=obj["header_b64"], measurements=obj["measurements"], kid=obj["kid"])


@dataclass(frozen=True)
class KbsResponse:
    """Either a released key or an error, never both."""

    key_b64: Optional[str] = None
    error: Optional[dict] = None

    def __post_init__(self):
        if (self.key_b64 is None) == (self.error is None):
            raise ValueError("exactly one of key_b64 / error must be set")

    def to_json_obj(self) -> dict:
        if self.key_b64 is not None:
            return {"key_b64": self.key_b64}
        return {"error": dict(self.error)}


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

def _default_transport(method: str, url: str, json_body, timeout: float):
    """HTTP transport built on requests; returns (status, body_bytes)."""
    import requests

    try:
        if method == "GET":
            resp = requests.get(url, timeout=timeout)
        else:
            resp = requests.post(url, json=json_body, timeout=timeout)
    except requests.RequestException as e:
        raise NetworkError(f"{method} {url}: {e}") from e
    return resp.status_code, resp.content


@dataclass
class ResolutionContext:
    """Everything open() needs to turn key references into key bytes.

    Pinned entries short-circuit fetching. ``sign_key`` / ``master_key`` are
    explicit operator-supplied values that apply regardless of kid (the
    operator is the trust root). Fetched signing keys are only accepted when
    they match a pinned fingerprint.
    """

    pinned_sign_keys: dict[str, bytes] = field(default_factory=dict)
    pinned_enc_keys: dict[str, bytes] = field(default_factory=dict)
    sign_key: Optional[bytes] = None
    master_key: Optional[bytes] = None
    sign_fingerprints: dict[str, str] = field(default_factory=dict)
    allow_insecure_http: bool = False
    kbs_url_override: Optional[str] = None
    http_timeout: float = 10.0
    transport: Callable = _default_transport
    _cache: dict[tuple[str, str], bytes] = field(default_factory=dict)

    def cached(self, purpose: str, kid: str) -> Optional[bytes]:
        return self._cache.get((purpose, kid))


def _read_file_uri(uri: str) -> bytes:
    parts = urlsplit(uri)
    path = parts.path
    if parts.netloc not in ("", "localhost"):
        raise UnsupportedScheme(f"file URIs must be local, got host {parts.netloc!r}")
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise NotFound(f"key file {path!r} does not exist") from None
    except OSError as e:
        raise NotFound(f"key file {path!r} unreadable: {e}") from None


def rewrite_kbs_url(uri: str, allow_insecure_http: bool) -> str:
    """kbs://host[:port]/path becomes the broker's http(s) base URL. Plain
    http is only permitted in test mode."""
    parts = urlsplit(uri)
    scheme = "http" if allow_insecure_http else "https"
    return urlunsplit((scheme, parts.netloc, parts.path.rstrip("/"), "", ""))


def kbs_fetch(
    url: str,
    request: KbsRequest,
    *,
    timeout: float = 10.0,
    transport: Callable = _default_transport,
) -> bytes:
    """POST a key release request to ``{url}/v1/key`` and return the 32-byte
    master key on success."""
    endpoint = url.rstrip("/") + KBS_KEY_PATH
    status, body = transport("POST", endpoint, request.to_json_obj(), timeout)
    try:
        payload = json.loads(body.decode("utf-8")) if body else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        payload = None
    if status == 200:
        if not isinstance(payload, dict) or not isinstance(payload.get("key_b64"), str):
            raise MalformedResponse("broker response is missing key_b64")
        try:
            key = b64decode(payload["key_b64"], "key_b64")
        except ValueError as e:
            raise MalformedResponse(str(e)) from None
        if len(key) != crypto.MASTER_KEY_LEN:
            raise MalformedResponse(f"broker returned a {len(key)}-byte key")
        return key
    reason = ""
    if isinstance(payload, dict) and isinstance(payload.get("error"), dict):
        reason = str(payload["error"].get("reason", ""))
    if status == 403:
        raise KbsDenied(reason or "key release denied")
    if status == 401:
        raise KbsSignatureRejected(reason or "header signature rejected by broker")
    raise NetworkError(f"broker returned HTTP {status} for {endpoint}: {reason or body[:200]!r}")


def resolve_key(
    ref: KeyRef,
    ctx: ResolutionContext,
    *,
    purpose: str,
    kbs_payload: Optional[tuple[bytes, Mapping[str, str]]] = None,
) -> bytes:
    """Resolve a key reference to raw key bytes (32 bytes for both Ed25519
    public keys and AES master keys). ``purpose`` is "sign" or "enc"; kbs
    resolution needs (header_bytes, measurements) in ``kbs_payload``.
    Results are cached per (purpose, kid) so one open() fetches at most once.
    """
    if purpose not in ("sign", "enc"):
        raise ValueError(f"unknown resolution purpose {purpose!r}")
    cached = ctx.cached(purpose, ref.kid)
    if cached is not None:
        return cached

    explicit = ctx.sign_key if purpose == "sign" else ctx.master_key
    pinned_map = ctx.pinned_sign_keys if purpose == "sign" else ctx.pinned_enc_keys
    fetched = False
    if explicit is not None:
        key = bytes(explicit)
    elif ref.kid in pinned_map:
        key = bytes(pinned_map[ref.kid])
    else:
        scheme = ref.scheme
        if scheme == "file":
            key = _read_file_uri(ref.uri)
        elif scheme in ("http", "https"):
            status, body = ctx.transport("GET", ref.uri, None, ctx.http_timeout)
            if status == 404:
                raise NotFound(f"key URI {ref.uri} returned 404")
            if status != 200:
                raise NetworkError(f"key URI {ref.uri} returned HTTP {status}")
            key = body
        elif scheme == "kbs":
            if kbs_payload is None:
                raise MalformedKeyRef("kbs resolution requires header bytes and measurements")
            header_bytes, measurements = kbs_payload
            base = ctx.kbs_url_override or rewrite_kbs_url(ref.uri, ctx.allow_insecure_http)
            request = KbsRequest(
                header_b64=b64encode(header_bytes), measurements=measurements, kid=ref.kid
            )
            key = kbs_fetch(base, request, timeout=ctx.http_timeout, transport=ctx.transport)
        else:  # pragma: no cover - KeyRef rejects unknown schemes on construction
            raise UnsupportedScheme(scheme)
        fetched = True

    if len(key) != 32:
        raise LengthMismatch(f"key {ref.kid!r} resolved to {len(key)} bytes, expected 32")
    if purpose == "sign" and fetched:
        fingerprint = ctx.sign_fingerprints.get(ref.kid)
        if fingerprint is None:
            raise UntrustedSigningKey(
                f"signing key {ref.kid!r} is not pinned and has no pinned fingerprint"
            )
        if hashlib.sha256(key).hexdigest() != fingerprint.lower():
            raise UntrustedSigningKey(f"signing key {ref.kid!r} does not match pinned fingerprint")
    ctx._cache[(purpose, ref.kid)] = key
    return key


def context_from_env(env: Mapping[str, str] = os.environ) -> ResolutionContext:
    """Resolution context configured from CT_* environment variables."""
    ctx = ResolutionContext()
    master_file = env.get("CT_MASTER_KEY_FILE")
    if master_file:
        with open(master_file, "rb") as f:
            ctx.master_key = f.read()
    sign_file = env.get("CT_SIGN_KEY_FILE")
    if sign_file:
        with open(sign_file, "rb") as f:
            ctx.sign_key = f.read()
    if env.get("CT_KBS_URL"):
        ctx.kbs_url_override = env["CT_KBS_URL"]
    if env.get("CT_KBS_INSECURE_HTTP", "").lower() in ("1", "true", "yes"):
        ctx.allow_insecure_http = True
    return ctx
