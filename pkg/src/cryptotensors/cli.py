"""Operator command line: keygen, encrypt, decrypt, inspect, verify, serve,
bench.

Exit codes are stable: 0 success, 1 verification/policy/authentication
failure, 2 usage or I/O error. All secrets arrive via file paths or the CT_*
environment variables; nothing is ever prompted for.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

from . import bench as benchmod
from . import crypto, kbs, load, serialize
from . import format as fmt
from .errors import (
    AuthenticationFailed,
    CryptoTensorsError,
    KbsDenied,
    KbsSignatureRejected,
    LayoutError,
    MalformedSignature,
    PolicyDenied,
    SignatureInvalid,
    UntrustedSigningKey,
)
from .keys import CryptoKeysMeta, ResolutionContext, b64decode, keys_meta_from_files
from .meta import (
    CRYPTO_KEYS_KEY,
    ENCRYPTION_KEY,
    POLICY_KEY,
    SIGNATURE_KEY,
    encryption_records_from_string,
    load_embedded,
)
from .policy import PolicyDoc

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2

_VERIFICATION_ERRORS = (
    SignatureInvalid,
    PolicyDenied,
    AuthenticationFailed,
    KbsDenied,
    KbsSignatureRejected,
    UntrustedSigningKey,
    MalformedSignature,
)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _read_key_file(path: str, expected_len: int, what: str) -> bytes:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) != expected_len:
        raise CryptoTensorsError(f"{what} {path!r} holds {len(data)} bytes, expected {expected_len}")
    return data


def _env_or_flag(value: str | None, env_name: str) -> str | None:
    return value or os.environ.get(env_name) or None


def _rand_from_seed(seed: int | None):
    if seed is None:
        return crypto.os_random
    return random.Random(seed).randbytes


# ---------------------------------------------------------------------------
# keygen
# ---------------------------------------------------------------------------

def _write_secret(path: str, data: bytes) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as f:
        f.write(data)


def cmd_keygen(args) -> int:
    if args.type == "master":
        key = crypto.generate_master_key()
        _write_secret(args.out, key)
        print(f"master key written to {args.out}")
        print(f"kid: {crypto.key_id(key)}")
        return EXIT_OK
    pair = crypto.SignKeyPair.generate()
    priv_path, pub_path = args.out + ".priv", args.out + ".pub"
    _write_secret(priv_path, pair.private)
    with open(pub_path, "wb") as f:
        f.write(pair.public)
    print(f"signing key written to {priv_path} (private) and {pub_path} (public)")
    print(f"kid: {crypto.key_id(pair.public)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# encrypt
# ---------------------------------------------------------------------------

def _load_policy_file(path: str) -> PolicyDoc:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    for half in ("local", "remote"):
        part = obj.get(half)
        if isinstance(part, dict) and isinstance(part.get("text"), (dict, list)):
            part["text"] = json.dumps(part["text"], sort_keys=True, separators=(",", ":"))
    return PolicyDoc.from_json_obj(obj)


def build_encrypt_config(args) -> serialize.SerializeConfig:
    master_path = _env_or_flag(args.master_key_file, "CT_MASTER_KEY_FILE")
    sign_path = _env_or_flag(args.sign_key_file, "CT_SIGN_KEY_FILE")
    if not master_path:
        raise CryptoTensorsError("no master key: pass --master-key-file or set CT_MASTER_KEY_FILE")
    if not sign_path:
        raise CryptoTensorsError("no signing key: pass --sign-key-file or set CT_SIGN_KEY_FILE")
    master_bytes = _read_key_file(master_path, crypto.MASTER_KEY_LEN, "master key file")
    seed_bytes = _read_key_file(sign_path, 32, "signing key file")
    master = crypto.MasterKey(bytes=master_bytes, kid=crypto.key_id(master_bytes))
    signer = crypto.SignKeyPair.from_seed(seed_bytes)

    if args.keys_meta_file:
        with open(args.keys_meta_file, "r", encoding="utf-8") as f:
            keys_meta = CryptoKeysMeta.from_json_obj(json.load(f))
    else:
        keys_meta = keys_meta_from_files(master_bytes, master_path, signer.public, sign_path)

    if args.encrypt in ("all", "none"):
        selection: object = args.encrypt
    else:
        selection = [n for n in args.encrypt.split(",") if n]

    policy = _load_policy_file(args.policy_file) if args.policy_file else PolicyDoc()
    return serialize.SerializeConfig(
        master_key=master,
        sign_keypair=signer,
        keys_meta=keys_meta,
        encrypt=selection,
        policy=policy,
        rand=_rand_from_seed(args.rng_seed),
    )


def _read_plain_tensors(path: str):
    """Load every tensor of a plain container into memory for re-serialization."""
    with load.open(path, load.OpenOptions()) as handle:
        if handle.keys_meta is not None:
            raise CryptoTensorsError(f"{path!r} already carries crypto metadata; decrypt it first")
        tensors = {}
        for name in handle.names():
            dtype, shape, buf = handle.get_tensor(name)
            tensors[name] = (dtype, shape, bytes(buf))
        return tensors, handle.metadata()


def cmd_encrypt(args) -> int:
    try:
        tensors, metadata = _read_plain_tensors(args.input)
        config = build_encrypt_config(args)
        serialize.serialize_file(tensors, args.output, config, metadata)
        plain_len = os.stat(args.input).st_size
        out_len = os.stat(args.output).st_size
        encrypted = (
            len(tensors)
            if config.encrypt == "all"
            else 0 if config.encrypt == "none" else len(config.encrypt)
        )
        print(f"tensors: {len(tensors)}")
        print(f"encrypted: {encrypted}")
        print(f"header growth: {out_len - plain_len} bytes")
        return EXIT_OK
    except (CryptoTensorsError, OSError, json.JSONDecodeError) as e:
        return _fail(str(e), EXIT_USAGE)


# ---------------------------------------------------------------------------
# decrypt
# ---------------------------------------------------------------------------

def build_open_options(args) -> load.OpenOptions:
    options = load.OpenOptions()
    ctx: ResolutionContext = options.resolution
    master_path = _env_or_flag(getattr(args, "master_key_file", None), "CT_MASTER_KEY_FILE")
    if master_path:
        ctx.master_key = _read_key_file(master_path, crypto.MASTER_KEY_LEN, "master key file")
    pub_path = _env_or_flag(getattr(args, "sign_pubkey_file", None), "CT_SIGN_KEY_FILE")
    if pub_path:
        ctx.sign_key = _read_key_file(pub_path, crypto.PUBLIC_KEY_LEN, "signing public key file")
    if os.environ.get("CT_KBS_URL"):
        ctx.kbs_url_override = os.environ["CT_KBS_URL"]
    if getattr(args, "kbs_url", None):
        ctx.kbs_url_override = args.kbs_url
    if os.environ.get("CT_KBS_INSECURE_HTTP", "").lower() in ("1", "true", "yes") or getattr(
        args, "insecure_http", False
    ):
        ctx.allow_insecure_http = True
    return options


def cmd_decrypt(args) -> int:
    try:
        options = build_open_options(args)
        with load.open(args.input, options) as handle:
            tensors = {}
            for name in handle.names():
                dtype, shape, buf = handle.get_tensor(name)
                tensors[name] = (dtype, shape, bytes(buf))
            metadata = handle.metadata()  # reserved keys stripped
        serialize.serialize_file(tensors, args.output, None, metadata)
        print(f"decrypted {len(tensors)} tensors to {args.output}")
        return EXIT_OK
    except _VERIFICATION_ERRORS as e:
        if isinstance(e, AuthenticationFailed):
            return _fail(f"authentication failed: {e}", EXIT_VERIFICATION)
        return _fail(str(e), EXIT_VERIFICATION)
    except (CryptoTensorsError, OSError) as e:
        return _fail(str(e), EXIT_USAGE)


# ---------------------------------------------------------------------------
# inspect / verify
# ---------------------------------------------------------------------------

def _inspect_report(path: str) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    header, (body_begin, body_end) = fmt.parse_header(blob)
    report: dict = {
        "path": path,
        "header_bytes": body_begin - 8,
        "body_bytes": body_end - body_begin,
        "tensor_count": len(header.tensors),
        "tensors": [
            {
                "name": t.name,
                "dtype": t.dtype.value,
                "shape": list(t.shape),
                "data_offsets": list(t.data_offsets),
            }
            for t in header.tensors
        ],
        "metadata_keys": sorted(k for k in header.metadata if k not in fmt.RESERVED_METADATA_KEYS),
        "signature_present": SIGNATURE_KEY in header.metadata,
        "encryption": "none",
    }
    if CRYPTO_KEYS_KEY in header.metadata:
        keys_meta = CryptoKeysMeta.from_json_obj(
            load_embedded(header.metadata[CRYPTO_KEYS_KEY], CRYPTO_KEYS_KEY)
        )
        # key references only; never key bytes
        report["crypto_keys"] = {
            "version": keys_meta.version,
            "enc": {"kid": keys_meta.enc.kid, "uri": keys_meta.enc.uri},
            "sign": {"kid": keys_meta.sign.kid, "uri": keys_meta.sign.uri},
        }
        encrypted = []
        if ENCRYPTION_KEY in header.metadata:
            encrypted = sorted(encryption_records_from_string(header.metadata[ENCRYPTION_KEY]))
        report["encryption"] = {"algorithm": crypto.ENC_ALG, "tensors": encrypted} if encrypted else "none"
        if POLICY_KEY in header.metadata:
            doc = PolicyDoc.from_json_obj(load_embedded(header.metadata[POLICY_KEY], POLICY_KEY))
            report["policy_languages"] = {
                half: text.lang
                for half, text in (("local", doc.local), ("remote", doc.remote))
                if text is not None
            }
    return report


def cmd_inspect(args) -> int:
    try:
        report = _inspect_report(args.path)
    except (CryptoTensorsError, OSError) as e:
        return _fail(str(e), EXIT_USAGE)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"file: {report['path']}")
    print(f"tensors: {report['tensor_count']} (header {report['header_bytes']} B, body {report['body_bytes']} B)")
    for t in report["tensors"]:
        print(f"  {t['name']}: {t['dtype']} {t['shape']} @ {t['data_offsets']}")
    if report["encryption"] == "none":
        print("encryption: none")
    else:
        enc = report["encryption"]
        print(f"encryption: {enc['algorithm']} over {len(enc['tensors'])} tensors")
    if "crypto_keys" in report:
        ck = report["crypto_keys"]
        print(f"enc key: kid={ck['enc']['kid']} uri={ck['enc']['uri']}")
        print(f"sign key: kid={ck['sign']['kid']} uri={ck['sign']['uri']}")
    if report.get("policy_languages"):
        langs = ", ".join(f"{k}={v}" for k, v in sorted(report["policy_languages"].items()))
        print(f"policy: {langs}")
    print(f"signature: {'present' if report['signature_present'] else 'absent'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        with open(args.path, "rb") as f:
            blob = f.read()
    except OSError as e:
        return _fail(str(e), EXIT_USAGE)
    try:
        header, _ = fmt.parse_header(blob)
    except LayoutError as e:
        print(f"verify: layout check failed: {e}")
        return EXIT_VERIFICATION
    except CryptoTensorsError as e:
        return _fail(str(e), EXIT_USAGE)

    if CRYPTO_KEYS_KEY not in header.metadata:
        print("verify: ok (plain file, layout valid)")
        return EXIT_OK
    if not args.pubkey_file:
        return _fail("encrypted file: pass --pubkey-file to check the signature", EXIT_USAGE)
    try:
        public = _read_key_file(args.pubkey_file, crypto.PUBLIC_KEY_LEN, "public key file")
        stripped, signature_b64 = fmt.strip_signature(header)
        if signature_b64 is None:
            print("verify: signature check failed: no __signature__")
            return EXIT_VERIFICATION
        signature = b64decode(signature_b64, SIGNATURE_KEY)
        ok = crypto.verify_header(public, fmt.canonicalize(stripped), signature)
    except (CryptoTensorsError, ValueError):
        print("verify: signature check failed: malformed signature")
        return EXIT_VERIFICATION
    if not ok:
        print("verify: signature check failed")
        return EXIT_VERIFICATION
    print("verify: ok (layout valid, signature valid)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve / bench
# ---------------------------------------------------------------------------

def cmd_serve(args) -> int:
    import logging

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    allow_http = args.insecure_http or os.environ.get("CT_KBS_INSECURE_HTTP", "").lower() in (
        "1",
        "true",
        "yes",
    )
    try:
        config = kbs.ServiceConfig(
            host=args.host, port=args.port, keystore_path=args.keystore, allow_plain_http=allow_http
        )
        server = kbs.KbsServer(config)
    except (CryptoTensorsError, ValueError, OSError) as e:
        return _fail(str(e), EXIT_USAGE)
    print(f"key broker listening on {server.base_url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
        fractions = tuple(float(f) for f in args.encrypt_fraction.split(","))
        spec = benchmod.BenchSpec(
            sizes=sizes,
            fractions=fractions,
            repeats=args.repeat,
            tensors=args.tensors,
            seed=args.seed,
        )
        report = benchmod.run_matrix(spec)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                report.write_csv(f)
        else:
            report.write_csv(sys.stdout)
        if args.check_trends:
            failed = False
            for finding in benchmod.assert_trends(report):
                status = "pass" if finding.passed else "FAIL"
                print(f"trend {finding.name}: {status} ({finding.detail})", file=sys.stderr)
                failed = failed or not finding.passed
            if failed:
                return EXIT_VERIFICATION
        return EXIT_OK
    except (CryptoTensorsError, OSError, ValueError) as e:
        return _fail(str(e), EXIT_USAGE)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cryptotensors", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a master key or signing keypair")
    p.add_argument("--type", choices=("master", "signing"), required=True)
    p.add_argument("--out", required=True, help="output path (signing keys get .priv/.pub suffixes)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("encrypt", help="encrypt a plain container")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--master-key-file", default=None)
    p.add_argument("--sign-key-file", default=None, help="Ed25519 private seed file")
    p.add_argument("--encrypt", default="all", help="'all', 'none', or comma-separated tensor names")
    p.add_argument("--policy-file", default=None)
    p.add_argument("--keys-meta-file", default=None)
    p.add_argument("--rng-seed", type=int, default=None, help="deterministic randomness (tests only)")
    p.set_defaults(func=cmd_encrypt)

    p = sub.add_parser("decrypt", help="decrypt to a plain container")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--master-key-file", default=None)
    p.add_argument("--sign-pubkey-file", default=None)
    p.add_argument("--kbs-url", default=None)
    p.add_argument("--insecure-http", action="store_true")
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("inspect", help="show the tensor table and crypto metadata")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="check layout and header signature")
    p.add_argument("path")
    p.add_argument("--pubkey-file", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", help="run the key broker service")
    p.add_argument("--keystore", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8600)
    p.add_argument("--insecure-http", action="store_true", help="acknowledge plain-HTTP (test mode)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="run serialization/loading benchmarks")
    p.add_argument("--sizes", default="65536", help="comma-separated per-tensor byte sizes")
    p.add_argument("--encrypt-fraction", default="0,0.1,0.5,1.0")
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--tensors", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p.add_argument("--check-trends", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
