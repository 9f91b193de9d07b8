"""Shared fixtures: deterministic randomness, fixed test keys, and helpers
for building serialized files."""

from __future__ import annotations

import random

import pytest

from cryptotensors import (
    Dtype,
    MasterKey,
    OpenOptions,
    PolicyDoc,
    SerializeConfig,
    SignKeyPair,
    default_keys_meta,
    key_id,
    serialize_bytes,
)
from cryptotensors.policy import StaticMeasurementProvider

DTYPES = list(Dtype)


def seeded_rand(seed: int):
    """Injectable randomness source: reproducible byte stream."""
    return random.Random(seed).randbytes


@pytest.fixture
def master_key() -> MasterKey:
    key = random.Random("master").randbytes(32)
    return MasterKey(bytes=key, kid=key_id(key))


@pytest.fixture
def sign_keypair() -> SignKeyPair:
    return SignKeyPair.from_seed(random.Random("signer").randbytes(32))


@pytest.fixture
def keys_meta(master_key, sign_keypair):
    return default_keys_meta(
        master_kid=master_key.kid,
        master_uri="file:///dev/null",
        sign_kid=key_id(sign_keypair.public),
        sign_uri="file:///dev/null",
    )


def make_config(master_key, sign_keypair, keys_meta, *, encrypt="all", policy=None, seed=None, **kw):
    return SerializeConfig(
        master_key=master_key,
        sign_keypair=sign_keypair,
        keys_meta=keys_meta,
        encrypt=encrypt,
        policy=policy or PolicyDoc(),
        rand=seeded_rand(seed) if seed is not None else __import__("secrets").token_bytes,
        **kw,
    )


@pytest.fixture
def config(master_key, sign_keypair, keys_meta):
    return make_config(master_key, sign_keypair, keys_meta)


def random_tensor_table(rng: random.Random, n_tensors: int, max_elements: int = 64) -> dict:
    """Random tensor map covering every dtype, scalars, and zero-size shapes."""
    table = {}
    for i in range(n_tensors):
        dtype = rng.choice(DTYPES)
        kind = rng.random()
        if kind < 0.1:
            shape: tuple[int, ...] = ()
        elif kind < 0.2:
            shape = tuple(rng.choice([0, 1, 2]) for _ in range(rng.randint(1, 3)))
        else:
            ndim = rng.randint(1, 3)
            shape = tuple(rng.randint(1, max(1, int(max_elements ** (1 / ndim)))) for _ in range(ndim))
        n = 1
        for d in shape:
            n *= d
        table[f"t{i:03d}_{dtype.value.lower()}"] = (dtype, shape, rng.randbytes(n * dtype.element_size))
    return table


@pytest.fixture
def tensor_table():
    return random_tensor_table(random.Random(7), 6)


def open_options(sign_keypair, master_key, measurements=None) -> OpenOptions:
    opts = OpenOptions()
    opts.resolution.sign_key = sign_keypair.public
    opts.resolution.master_key = master_key.bytes
    if measurements is not None:
        opts.measurement_provider = StaticMeasurementProvider(measurements)
    return opts


def encrypted_blob(tensor_table, master_key, sign_keypair, keys_meta, **kw) -> bytes:
    return serialize_bytes(tensor_table, make_config(master_key, sign_keypair, keys_meta, **kw))
