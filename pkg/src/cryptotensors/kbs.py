"""Reference key broker: verifies header signatures, evaluates the remote
policy against client-asserted measurements, and releases master keys.

The broker trusts measurements as asserted by the client; nothing here
attests the client environment. Keys never appear in logs.

HTTP surface: POST /v1/key (request/response JSON), GET /v1/health.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from . import crypto, format as fmt, meta, policy as pol
from .errors import (
    BadKeyLength,
    CryptoTensorsError,
    MalformedKeystore,
    MalformedSignature,
)
from .keys import CryptoKeysMeta, KbsRequest, KbsResponse, b64decode, b64encode

logger = logging.getLogger("cryptotensors.kbs")

PROTOCOL_VERSION = "1"


@dataclass(frozen=True)
class KeyStore:
    """Master keys the broker may release plus the signer keys it trusts.
    Immutable after load; never written back."""

    entries: dict[str, bytes] = field(default_factory=dict)
    trusted_signers: dict[str, bytes] = field(default_factory=dict)


def load_keystore(path) -> KeyStore:
    """Load a keystore file: {"keys": [{kid, key_b64}], "signers": [{kid, pub_b64}]}."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedKeystore(f"cannot load keystore {path!r}: {e}") from e
    if not isinstance(obj, dict):
        raise MalformedKeystore("keystore must be a JSON object")
    entries: dict[str, bytes] = {}
    signers: dict[str, bytes] = {}
    for section, target, blob_field, expected_len in (
        ("keys", entries, "key_b64", crypto.MASTER_KEY_LEN),
        ("signers", signers, "pub_b64", crypto.PUBLIC_KEY_LEN),
    ):
        for item in obj.get(section, []):
            if not isinstance(item, dict) or not isinstance(item.get("kid"), str):
                raise MalformedKeystore(f"{section} entries must carry a kid")
            kid = item["kid"]
            if kid in target:
                raise MalformedKeystore(f"duplicate kid {kid!r} in {section}")
            blob = item.get(blob_field)
            if not isinstance(blob, str):
                raise MalformedKeystore(f"{section} entry {kid!r} is missing {blob_field}")
            try:
                key = b64decode(blob, blob_field)
            except ValueError as e:
                raise MalformedKeystore(str(e)) from None
            if len(key) != expected_len:
                raise BadKeyLength(
                    f"{section} entry {kid!r} decodes to {len(key)} bytes, expected {expected_len}"
                )
            target[kid] = key
    return KeyStore(entries=entries, trusted_signers=signers)


def _error_response(status: int, code: str, reason: str) -> tuple[KbsResponse, int]:
    return KbsResponse(error={"code": code, "reason": reason}), status


def handle_key_request(
    request: KbsRequest,
    store: KeyStore,
    clock: Callable[[], datetime] = pol.utcnow,
) -> tuple[KbsResponse, int]:
    """Decide one key release request.

    Order is fixed: decode header, verify its signature against a trusted
    signer, evaluate the remote policy, then release. Responses are
    deterministic given (request, store, clock).
    """
    try:
        header_bytes = b64decode(request.header_b64, "header_b64")
        obj = json.loads(header_bytes.decode("utf-8"))
        header = fmt.header_from_json_obj(obj)
    except (ValueError, UnicodeDecodeError, json.JSONDecodeError, CryptoTensorsError) as e:
        return _error_response(400, "malformed_request", f"header undecodable: {e}")

    if meta.CRYPTO_KEYS_KEY not in header.metadata:
        return _error_response(400, "malformed_request", "header carries no __crypto_keys__")
    try:
        keys_meta = CryptoKeysMeta.from_json_obj(
            meta.load_embedded(header.metadata[meta.CRYPTO_KEYS_KEY], meta.CRYPTO_KEYS_KEY)
        )
    except CryptoTensorsError as e:
        return _error_response(400, "malformed_request", str(e))

    stripped, signature_b64 = fmt.strip_signature(header)
    if signature_b64 is None:
        return _error_response(401, "signature_rejected", "header carries no __signature__")
    signer = store.trusted_signers.get(keys_meta.sign.kid)
    if signer is None:
        logger.info("key request rejected: unknown signer kid=%s", keys_meta.sign.kid)
        return _error_response(401, "signature_rejected", f"unknown signer {keys_meta.sign.kid!r}")
    try:
        signature = b64decode(signature_b64, meta.SIGNATURE_KEY)
        valid = crypto.verify_header(signer, fmt.canonicalize(stripped), signature)
    except (ValueError, MalformedSignature):
        valid = False
    if not valid:
        logger.info("key request rejected: bad signature kid=%s", keys_meta.sign.kid)
        return _error_response(401, "signature_rejected", "header signature invalid")

    remote = None
    if meta.POLICY_KEY in header.metadata:
        try:
            doc = pol.PolicyDoc.from_json_obj(
                meta.load_embedded(header.metadata[meta.POLICY_KEY], meta.POLICY_KEY)
            )
        except CryptoTensorsError as e:
            return _error_response(400, "malformed_request", str(e))
        remote = doc.remote
    try:
        decision = pol.decide(remote, request.measurements, clock())
    except CryptoTensorsError as e:
        # fail closed on policies the broker cannot evaluate
        logger.info("key request denied: unevaluable policy (%s)", e)
        return _error_response(403, "policy_denied", f"remote policy not evaluable: {e}")
    if not decision.allow:
        logger.info("key request denied by policy: kid=%s", request.kid)
        return _error_response(403, "policy_denied", decision.reason)

    if request.kid != keys_meta.enc.kid:
        return _error_response(
            400,
            "malformed_request",
            f"requested kid {request.kid!r} does not match the header's enc kid",
        )
    released = store.entries.get(keys_meta.enc.kid)
    if released is None:
        logger.info("key request failed: unknown key kid=%s", keys_meta.enc.kid)
        return _error_response(404, "unknown_key", f"no key for kid {keys_meta.enc.kid!r}")
    logger.info("key released: kid=%s", keys_meta.enc.kid)
    return KbsResponse(key_b64=b64encode(released)), 200


# ---------------------------------------------------------------------------
# HTTP server
# ---------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0
    keystore_path: Optional[str] = None
    clock: Callable[[], datetime] = pol.utcnow
    allow_plain_http: bool = False  # test-only flag; this server speaks plain HTTP


class KbsServer:
    """Threaded HTTP wrapper around handle_key_request. The store may be
    attached after startup; /v1/health reports 503 until it is."""

    def __init__(self, config: ServiceConfig, store: Optional[KeyStore] = None):
        if not config.allow_plain_http:
            raise ValueError(
                "this server speaks plain HTTP; set allow_plain_http (test mode) "
                "or terminate TLS in front of it"
            )
        self.config = config
        self.store = store
        if store is None and config.keystore_path:
            self.store = load_keystore(config.keystore_path)
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt_, *args):  # route through our logger
                logger.debug("http: " + fmt_, *args)

            def _send(self, status: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path.rstrip("/") != "/v1/health":
                    self._send(404, {"error": {"code": "not_found", "reason": self.path}})
                    return
                if outer.store is None:
                    self._send(503, {"status": "starting", "version": PROTOCOL_VERSION})
                    return
                self._send(200, {"status": "ok", "version": PROTOCOL_VERSION})

            def do_POST(self):
                if self.path.rstrip("/") != "/v1/key":
                    self._send(404, {"error": {"code": "not_found", "reason": self.path}})
                    return
                if outer.store is None:
                    self._send(503, {"error": {"code": "not_ready", "reason": "keystore not loaded"}})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    request = KbsRequest.from_json_obj(json.loads(self.rfile.read(length)))
                except Exception as e:
                    self._send(400, {"error": {"code": "malformed_request", "reason": str(e)}})
                    return
                response, status = handle_key_request(request, outer.store, outer.config.clock)
                self._send(status, response.to_json_obj())

        self._httpd = ThreadingHTTPServer((config.host, config.port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://{self.config.host}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "KbsServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
