"""Key reference parsing and resolution across file / http / kbs schemes."""

from __future__ import annotations

import hashlib
import json

import pytest

from cryptotensors import keys
from cryptotensors.errors import (
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


def test_parse_key_ref_maps_jwk_fields():
    ref = keys.parse_key_ref(
        '{"kid":"k1","jku":"file:///keys/pub.bin","alg":"Ed25519","kty":"OKP"}'
    )
    assert ref.kid == "k1"
    assert ref.uri == "file:///keys/pub.bin"
    assert ref.scheme == "file"
    assert ref.alg == "Ed25519"
    assert ref.kty == "OKP"
    assert ref.x5c == ()


def test_parse_key_ref_carries_x5c():
    ref = keys.parse_key_ref({"kid": "k", "jku": "https://x/y", "x5c": ["AAAA", "BBBB"]})
    assert ref.x5c == ("AAAA", "BBBB")


def test_unsupported_scheme():
    with pytest.raises(UnsupportedScheme):
        keys.parse_key_ref('{"kid":"k1","jku":"ftp://host/key"}')


@pytest.mark.parametrize(
    "jwk",
    ['{"jku":"file:///x"}', '{"kid":"","jku":"file:///x"}', '{"kid":"k"}', "[1]", "not json"],
)
def test_malformed_key_refs(jwk):
    with pytest.raises(MalformedKeyRef):
        keys.parse_key_ref(jwk)


def test_crypto_keys_meta_roundtrip():
    meta = keys.default_keys_meta("mk", "file:///m.key", "sk", "file:///s.pub")
    obj = meta.to_json_obj()
    assert obj["version"] == "1"
    again = keys.CryptoKeysMeta.from_json_obj(json.loads(json.dumps(obj)))
    assert again == meta


def test_crypto_keys_meta_rejects_wrong_version():
    meta = keys.default_keys_meta("mk", "file:///m", "sk", "file:///s")
    obj = meta.to_json_obj()
    obj["version"] = "2"
    with pytest.raises(MalformedKeyRef):
        keys.CryptoKeysMeta.from_json_obj(obj)


def test_crypto_keys_meta_rejects_unknown_algorithms():
    meta = keys.default_keys_meta("mk", "file:///m", "sk", "file:///s")
    for field, alg in (("enc", "A128GCM"), ("sign", "RSA")):
        obj = meta.to_json_obj()
        obj[field]["alg"] = alg
        with pytest.raises(MalformedKeyRef, match="algorithm"):
            keys.CryptoKeysMeta.from_json_obj(obj)


# ---------------------------------------------------------------------------
# resolve_key
# ---------------------------------------------------------------------------

def file_ref(path, kid="k1") -> keys.KeyRef:
    return keys.KeyRef(kid=kid, uri=f"file://{path}")


def test_resolve_file_scheme(tmp_path):
    key = bytes(range(32))
    path = tmp_path / "master.key"
    path.write_bytes(key)
    ctx = keys.ResolutionContext()
    assert keys.resolve_key(file_ref(path), ctx, purpose="enc") == key


def test_resolve_file_length_mismatch(tmp_path):
    path = tmp_path / "short.key"
    path.write_bytes(bytes(31))
    with pytest.raises(LengthMismatch):
        keys.resolve_key(file_ref(path), keys.ResolutionContext(), purpose="enc")


def test_resolve_file_not_found(tmp_path):
    with pytest.raises(NotFound):
        keys.resolve_key(file_ref(tmp_path / "missing"), keys.ResolutionContext(), purpose="enc")


def test_resolution_is_cached_per_kid(tmp_path):
    key = bytes(32)
    path = tmp_path / "m.key"
    path.write_bytes(key)
    ctx = keys.ResolutionContext()
    ref = file_ref(path)
    assert keys.resolve_key(ref, ctx, purpose="enc") == key
    path.unlink()  # later lookups must come from the cache
    assert keys.resolve_key(ref, ctx, purpose="enc") == key


def test_pinned_keys_short_circuit_fetching():
    ctx = keys.ResolutionContext(pinned_enc_keys={"k1": bytes(32)})
    ref = keys.KeyRef(kid="k1", uri="https://unreachable.example/key")
    assert keys.resolve_key(ref, ctx, purpose="enc") == bytes(32)


def test_fetched_sign_key_requires_fingerprint(tmp_path):
    key = bytes(range(32))
    path = tmp_path / "sign.pub"
    path.write_bytes(key)
    ref = file_ref(path, kid="signer")
    with pytest.raises(UntrustedSigningKey):
        keys.resolve_key(ref, keys.ResolutionContext(), purpose="sign")
    good = keys.ResolutionContext(
        sign_fingerprints={"signer": hashlib.sha256(key).hexdigest()}
    )
    assert keys.resolve_key(ref, good, purpose="sign") == key
    bad = keys.ResolutionContext(sign_fingerprints={"signer": "00" * 32})
    with pytest.raises(UntrustedSigningKey):
        keys.resolve_key(ref, bad, purpose="sign")


def test_explicit_sign_key_is_trusted_as_is():
    ctx = keys.ResolutionContext(sign_key=bytes(32))
    ref = keys.KeyRef(kid="whoever", uri="kbs://broker.example/keys")
    assert keys.resolve_key(ref, ctx, purpose="sign") == bytes(32)


def test_resolve_http_get():
    calls = []

    def transport(method, url, body, timeout):
        calls.append((method, url))
        return 200, bytes(32)

    ctx = keys.ResolutionContext(transport=transport)
    ref = keys.KeyRef(kid="k", uri="https://keys.example/pub")
    assert keys.resolve_key(ref, ctx, purpose="enc") == bytes(32)
    assert calls == [("GET", "https://keys.example/pub")]


def test_resolve_http_errors():
    ctx404 = keys.ResolutionContext(transport=lambda *a: (404, b""))
    with pytest.raises(NotFound):
        keys.resolve_key(keys.KeyRef(kid="k", uri="https://x/k"), ctx404, purpose="enc")
    ctx500 = keys.ResolutionContext(transport=lambda *a: (500, b"oops"))
    with pytest.raises(NetworkError):
        keys.resolve_key(keys.KeyRef(kid="k", uri="https://x/k"), ctx500, purpose="enc")


# ---------------------------------------------------------------------------
# kbs client
# ---------------------------------------------------------------------------

def _request() -> keys.KbsRequest:
    return keys.KbsRequest(header_b64=keys.b64encode(b"{}"), measurements={"os": "linux"}, kid="mk")


def test_rewrite_kbs_url():
    assert keys.rewrite_kbs_url("kbs://broker:8600/base", False) == "https://broker:8600/base"
    assert keys.rewrite_kbs_url("kbs://broker", True) == "http://broker"


def test_kbs_fetch_success_and_wire_shape():
    seen = {}

    def transport(method, url, body, timeout):
        seen["method"], seen["url"], seen["body"] = method, url, body
        return 200, json.dumps({"key_b64": keys.b64encode(bytes(32))}).encode()

    key = keys.kbs_fetch("http://broker:1", _request(), transport=transport)
    assert key == bytes(32)
    assert seen["method"] == "POST"
    assert seen["url"] == "http://broker:1/v1/key"
    assert set(seen["body"]) == {"header_b64", "measurements", "kid"}
    # the client sends the header and measurements, never key material
    assert "key" not in json.dumps(seen["body"]).replace("key_b64", "").replace('"kid"', "")


def test_kbs_fetch_denied_carries_reason():
    def transport(method, url, body, timeout):
        return 403, json.dumps({"error": {"code": "policy_denied", "reason": "org mismatch"}}).encode()

    with pytest.raises(KbsDenied) as exc:
        keys.kbs_fetch("http://b", _request(), transport=transport)
    assert exc.value.reason == "org mismatch"


def test_kbs_fetch_signature_rejected():
    with pytest.raises(KbsSignatureRejected):
        keys.kbs_fetch("http://b", _request(), transport=lambda *a: (401, b"{}"))


@pytest.mark.parametrize(
    "status,body",
    [
        (200, b"not json"),
        (200, b"{}"),
        (200, json.dumps({"key_b64": "AAAA"}).encode()),  # wrong length
        (200, json.dumps({"key_b64": "!!!"}).encode()),
    ],
)
def test_kbs_fetch_malformed_responses(status, body):
    with pytest.raises(MalformedResponse):
        keys.kbs_fetch("http://b", _request(), transport=lambda *a: (status, body))


def test_kbs_fetch_other_status_is_network_error():
    with pytest.raises(NetworkError):
        keys.kbs_fetch("http://b", _request(), transport=lambda *a: (500, b""))


def test_resolve_kbs_requires_payload():
    ref = keys.KeyRef(kid="mk", uri="kbs://broker/keys")
    with pytest.raises(MalformedKeyRef):
        keys.resolve_key(ref, keys.ResolutionContext(), purpose="enc")


def test_resolve_kbs_roundtrip_and_determinism():
    released = bytes(range(32))
    calls = []

    def transport(method, url, body, timeout):
        calls.append(url)
        assert body["kid"] == "mk"
        return 200, json.dumps({"key_b64": keys.b64encode(released)}).encode()

    ctx = keys.ResolutionContext(transport=transport, allow_insecure_http=True)
    ref = keys.KeyRef(kid="mk", uri="kbs://broker:9/path")
    payload = (b'{"hdr":1}', {"os": "linux"})
    assert keys.resolve_key(ref, ctx, purpose="enc", kbs_payload=payload) == released
    assert keys.resolve_key(ref, ctx, purpose="enc", kbs_payload=payload) == released
    assert calls == ["http://broker:9/path/v1/key"]  # cached after the first fetch
