"""numpy save/load mirroring the reference API.

``save_file(tensors, path)`` with no config writes a standard plain
container; passing ``config`` (a plain mapping, see below) encrypts and signs
it. Loading is transparent either way.

Config keys: ``alg``, ``master_key`` / ``master_key_file``, ``sign_key`` /
``sign_key_file``, ``encrypt`` ("all" | "none" | [names]), ``policy``
({"local": {...}, "remote": {...}}), ``keys`` (explicit key references),
``rng_seed`` (reproducible output, tests only). Missing key material falls
back to CT_MASTER_KEY_FILE / CT_SIGN_KEY_FILE.
"""

from __future__ import annotations

import os
import tempfile
from typing import Mapping, Optional

import numpy as np

import cryptotensors as ct

from ._compat import serialize_config_from_mapping, tensors_from_arrays


def _core_config(config: Optional[Mapping]) -> Optional[ct.SerializeConfig]:
    if config is None:
        return None
    return serialize_config_from_mapping(config)


def save(
    tensor_dict: Mapping[str, np.ndarray],
    config: Optional[Mapping] = None,
    metadata: Optional[Mapping[str, str]] = None,
) -> bytes:
    """Serialize to bytes; plain without config, encrypted+signed with one."""
    return ct.serialize_bytes(tensors_from_arrays(tensor_dict), _core_config(config), metadata)


def save_file(
    tensor_dict: Mapping[str, np.ndarray],
    filename,
    config: Optional[Mapping] = None,
    metadata: Optional[Mapping[str, str]] = None,
) -> None:
    """Serialize to a file; byte-identical to ``save`` for the same inputs."""
    ct.serialize_file(tensors_from_arrays(tensor_dict), filename, _core_config(config), metadata)


def load_file(filename, options: Optional[ct.OpenOptions] = None) -> dict[str, np.ndarray]:
    """Load every tensor into memory as numpy arrays."""
    from . import safe_open

    out = {}
    with safe_open(filename, framework="numpy", options=options) as f:
        for name in f.keys():
            out[name] = np.array(f.get_tensor(name))  # own the data beyond the handle
    return out


def load(data: bytes, options: Optional[ct.OpenOptions] = None) -> dict[str, np.ndarray]:
    """Load tensors from an in-memory file image."""
    fd, path = tempfile.mkstemp(prefix=".cst-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        return load_file(path, options=options)
    finally:
        os.unlink(path)


__all__ = ["load", "load_file", "save", "save_file"]
