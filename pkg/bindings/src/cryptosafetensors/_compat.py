"""Shared plumbing: numpy <-> container dtype mapping, config translation,
and environment-driven loader options."""

from __future__ import annotations

import base64
import os
from typing import Mapping, Optional

import numpy as np

import cryptotensors as ct
from cryptotensors import crypto
from cryptotensors.policy import PolicyDoc

# BF16 is representable in the container but has no numpy dtype; it is
# rejected here exactly like in the reference numpy binding.
DTYPE_TO_NUMPY = {
    ct.Dtype.BOOL: np.bool_,
    ct.Dtype.U8: np.uint8,
    ct.Dtype.I8: np.int8,
    ct.Dtype.I16: np.int16,
    ct.Dtype.U16: np.uint16,
    ct.Dtype.F16: np.float16,
    ct.Dtype.F32: np.float32,
    ct.Dtype.U32: np.uint32,
    ct.Dtype.I32: np.int32,
    ct.Dtype.F64: np.float64,
    ct.Dtype.U64: np.uint64,
    ct.Dtype.I64: np.int64,
}

NUMPY_TO_DTYPE = {np.dtype(v).name: k for k, v in DTYPE_TO_NUMPY.items()}

CONFIG_KEYS = {
    "alg",
    "master_key",
    "master_key_file",
    "sign_key",
    "sign_key_file",
    "encrypt",
    "policy",
    "keys",
    "rng_seed",
}


def numpy_dtype_for(dtype: ct.Dtype) -> np.dtype:
    try:
        return np.dtype(DTYPE_TO_NUMPY[dtype])
    except KeyError:
        raise TypeError(f"dtype {dtype.value} has no numpy representation") from None


def container_dtype_for(array: np.ndarray) -> ct.Dtype:
    name = array.dtype.name
    if name not in NUMPY_TO_DTYPE:
        raise TypeError(f"numpy dtype {name!r} is not supported by the container format")
    return NUMPY_TO_DTYPE[name]


def tensors_from_arrays(tensor_dict: Mapping[str, np.ndarray]) -> dict:
    tensors = {}
    for name, array in tensor_dict.items():
        if not isinstance(array, np.ndarray):
            raise TypeError(f"tensor {name!r} is not a numpy array")
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        contiguous = array if array.flags["C_CONTIGUOUS"] else np.ascontiguousarray(array)
        tensors[name] = (container_dtype_for(contiguous), contiguous.shape, contiguous.tobytes())
    return tensors


def array_from_buffer(dtype: ct.Dtype, shape, buf) -> np.ndarray:
    np_dtype = numpy_dtype_for(dtype)
    return np.frombuffer(buf, dtype=np_dtype).reshape(shape)


def _key_bytes(value, what: str) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        data = bytes(value)
    elif isinstance(value, str):
        data = base64.b64decode(value.encode("ascii"), validate=True)
    else:
        raise TypeError(f"{what} must be bytes or base64 text")
    if len(data) != 32:
        raise ValueError(f"{what} must be 32 bytes, got {len(data)}")
    return data


def _read_key_file(path: str, what: str) -> bytes:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) != 32:
        raise ValueError(f"{what} {path!r} holds {len(data)} bytes, expected 32")
    return data


def serialize_config_from_mapping(config: Mapping, env: Mapping[str, str] = os.environ) -> ct.SerializeConfig:
    """Translate a plain config mapping (wire-style keys) into the core
    serializer config. Unknown keys are rejected; master/signing keys fall
    back to the CT_* environment variables."""
    unknown = set(config) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")

    master_path = config.get("master_key_file") or env.get("CT_MASTER_KEY_FILE")
    if "master_key" in config:
        master_bytes = _key_bytes(config["master_key"], "master_key")
    elif master_path:
        master_bytes = _read_key_file(master_path, "master key file")
    else:
        raise ValueError("config needs master_key or master_key_file (or CT_MASTER_KEY_FILE)")

    sign_path = config.get("sign_key_file") or env.get("CT_SIGN_KEY_FILE")
    if "sign_key" in config:
        seed = _key_bytes(config["sign_key"], "sign_key")
    elif sign_path:
        seed = _read_key_file(sign_path, "signing key file")
    else:
        raise ValueError("config needs sign_key or sign_key_file (or CT_SIGN_KEY_FILE)")
    signer = ct.SignKeyPair.from_seed(seed)

    if "keys" in config:
        keys_meta = ct.CryptoKeysMeta.from_json_obj(config["keys"])
    elif master_path and sign_path:
        keys_meta = ct.keys_meta_from_files(master_bytes, master_path, signer.public, sign_path)
    else:
        raise ValueError("config needs 'keys' when key material is passed by value")

    rand = crypto.os_random
    if "rng_seed" in config:
        import random

        rand = random.Random(config["rng_seed"]).randbytes

    return ct.SerializeConfig(
        master_key=ct.MasterKey(bytes=master_bytes, kid=keys_meta.enc.kid),
        sign_keypair=signer,
        keys_meta=keys_meta,
        enc_alg=config.get("alg", crypto.ENC_ALG),
        encrypt=config.get("encrypt", "all"),
        policy=PolicyDoc.from_json_obj(config["policy"]) if "policy" in config else PolicyDoc(),
        rand=rand,
    )


def open_options_from_env(env: Mapping[str, str] = os.environ) -> ct.OpenOptions:
    """Loader options from CT_* variables: CT_MASTER_KEY_FILE pins the master
    key, CT_SIGN_KEY_FILE names the signing *public* key, CT_KBS_URL overrides
    the broker address, CT_KBS_INSECURE_HTTP enables plain http (tests)."""
    options = ct.OpenOptions()
    master_path = env.get("CT_MASTER_KEY_FILE")
    if master_path:
        options.resolution.master_key = _read_key_file(master_path, "master key file")
    sign_path = env.get("CT_SIGN_KEY_FILE")
    if sign_path:
        options.resolution.sign_key = _read_key_file(sign_path, "signing public key file")
    if env.get("CT_KBS_URL"):
        options.resolution.kbs_url_override = env["CT_KBS_URL"]
    if env.get("CT_KBS_INSECURE_HTTP", "").lower() in ("1", "true", "yes"):
        options.resolution.allow_insecure_http = True
    return options


def resolve_options(options: Optional[ct.OpenOptions]) -> ct.OpenOptions:
    return options if options is not None else open_options_from_env()
