#!/usr/bin/env python3
"""End-to-end walkthrough on synthetic weights: generate keys, write an
encrypted container with local + remote policies, start the loopback key
broker, and load tensors back through automatic key release.
"""

from __future__ import annotations

import json
import random
import tempfile
from pathlib import Path

import cryptotensors as ct
from cryptotensors import crypto, kbs, load
from cryptotensors.policy import PolicyDoc, PolicyText, StaticMeasurementProvider


def main() -> None:
    rng = random.Random(0)
    tensors = {
        f"layer.{i}.weight": (ct.Dtype.F32, (64, 32), rng.randbytes(64 * 32 * 4))
        for i in range(4)
    }

    master_bytes = crypto.generate_master_key()
    master = ct.MasterKey(bytes=master_bytes, kid=ct.key_id(master_bytes))
    signer = ct.SignKeyPair.generate()
    sign_kid = ct.key_id(signer.public)

    store = kbs.KeyStore(
        entries={master.kid: master.bytes},
        trusted_signers={sign_kid: signer.public},
    )
    with kbs.KbsServer(kbs.ServiceConfig(allow_plain_http=True), store=store) as server:
        print(f"key broker up at {server.base_url}")

        keys_meta = ct.default_keys_meta(
            master_kid=master.kid,
            master_uri=f"kbs://127.0.0.1:{server.port}/",
            sign_kid=sign_kid,
            sign_uri="file:///dev/null",
        )
        policy = PolicyDoc(
            local=PolicyText("ct-json-v1", json.dumps({"time_before": "2030-01-01T00:00:00Z"})),
            remote=PolicyText("ct-json-v1", json.dumps({"eq": ["$m.org", "acme"]})),
        )
        config = ct.SerializeConfig(
            master_key=master, sign_keypair=signer, keys_meta=keys_meta, policy=policy
        )

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.ct"
            ct.serialize_file(tensors, path, config, {"model": "demo"})
            print(f"wrote {path.stat().st_size} bytes ({len(tensors)} encrypted tensors)")

            options = load.OpenOptions()
            options.resolution.sign_key = signer.public
            options.resolution.allow_insecure_http = True
            options.measurement_provider = StaticMeasurementProvider(
                {"org": "acme", "device_id": "demo-host"}
            )
            with ct.open(path, options) as handle:
                name = handle.names()[0]
                dtype, shape, buf = handle.get_tensor(name)
                assert bytes(buf) == tensors[name][2]
                print(f"loaded {name}: dtype={dtype.value} shape={shape} ({len(buf)} bytes)")
                print(f"decrypt counters: {handle.decrypt_stats()}")

            denied = load.OpenOptions()
            denied.resolution.sign_key = signer.public
            denied.resolution.allow_insecure_http = True
            denied.measurement_provider = StaticMeasurementProvider({"org": "other"})
            try:
                ct.open(path, denied)
            except ct.CryptoTensorsError as e:
                print(f"open with wrong org denied by broker: {e}")


if __name__ == "__main__":
    main()
