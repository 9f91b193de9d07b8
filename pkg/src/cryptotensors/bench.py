"""Benchmark harness: deterministic synthetic workloads, phase timings, and
scale-free trend checks.

Encrypted-fraction subsets are nested (each level is a superset of the
previous) and the whole workload is a pure function of the seed, so runs are
reproducible. Trend checks assert shapes of the curves, never absolute
times, so they pass on any machine.
"""

from __future__ import annotations

import os
import random
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import crypto, load, serialize
from .keys import default_keys_meta
from .format import Dtype

SERIALIZE = "serialize"
OPEN = "open"
FIRST_ACCESS = "first_access"
SECOND_ACCESS = "second_access"
PHASES = (SERIALIZE, OPEN, FIRST_ACCESS, SECOND_ACCESS)

CSV_COLUMNS = ("phase", "tensor_bytes", "encrypted_fraction", "mean_seconds", "header_bytes", "body_bytes")


@dataclass(frozen=True)
class BenchSpec:
    """Workload matrix: per-tensor byte sizes x encrypted fractions x repeats."""

    sizes: tuple[int, ...] = (65536,)
    fractions: tuple[float, ...] = (0.0, 0.1, 0.5, 1.0)
    repeats: int = 20
    tensors: int = 48
    seed: int = 0

    def __post_init__(self):
        if not self.sizes or not self.fractions or self.repeats < 1 or self.tensors < 1:
            raise ValueError("bench spec must be non-empty")


@dataclass(frozen=True)
class BenchRow:
    phase: str
    tensor_bytes: int
    encrypted_fraction: float
    encrypted_count: int
    mean: float
    stddev: float
    n: int
    header_bytes: int
    body_bytes: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    environment: dict[str, str] = field(default_factory=dict)

    def write_csv(self, stream) -> None:
        stream.write(",".join(CSV_COLUMNS) + "\n")
        for r in self.rows:
            stream.write(
                f"{r.phase},{r.tensor_bytes},{r.encrypted_fraction},"
                f"{r.mean:.9f},{r.header_bytes},{r.body_bytes}\n"
            )


@dataclass(frozen=True)
class Finding:
    name: str
    passed: bool
    detail: str


def generate_workload(size: int, count: int, seed: int) -> dict:
    """Synthetic tensor table: ``count`` F32 tensors of ``size`` bytes each.
    Names embed the size so no name repeats across workload sizes; content is
    a pure function of the seed."""
    rng = random.Random(f"{seed}:{size}")
    elements = max(1, size // 4)
    return {
        f"s{size}_t{i:04d}": (Dtype.F32, (elements,), rng.randbytes(elements * 4))
        for i in range(count)
    }


def nested_selections(names: Sequence[str], fractions: Sequence[float], seed: int) -> dict[float, list[str]]:
    """Encrypted-name sets per fraction; prefixes of one seeded shuffle, so
    every level is a superset of all smaller levels."""
    order = list(names)
    random.Random(f"{seed}:selection").shuffle(order)
    out = {}
    for fraction in fractions:
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction {fraction} outside [0, 1]")
        out[fraction] = sorted(order[: round(fraction * len(order))])
    return out


def _bench_keys(seed: int) -> tuple[crypto.MasterKey, crypto.SignKeyPair]:
    rng = random.Random(f"{seed}:keys")
    master = crypto.MasterKey(bytes=rng.randbytes(32), kid="bench-master")
    signer = crypto.SignKeyPair.from_seed(rng.randbytes(32))
    return master, signer


def _config_for(selected: list[str], master: crypto.MasterKey, signer: crypto.SignKeyPair) -> serialize.SerializeConfig:
    keys_meta = default_keys_meta(
        master_kid=master.kid,
        master_uri="file:///dev/null",
        sign_kid=crypto.key_id(signer.public),
        sign_uri="file:///dev/null",
    )
    return serialize.SerializeConfig(
        master_key=master,
        sign_keypair=signer,
        keys_meta=keys_meta,
        encrypt=list(selected),
    )


def run_matrix(spec: BenchSpec, clock: Callable[[], float] = time.perf_counter) -> BenchReport:
    """Time all phases over the size x fraction matrix. One warm-up iteration
    per cell is discarded before the measured repeats."""
    import platform

    master, signer = _bench_keys(spec.seed)
    report = BenchReport(
        environment={
            "python": platform.python_version(),
            "platform": platform.platform(),
            "repeats": str(spec.repeats),
            "seed": str(spec.seed),
        }
    )
    for size in spec.sizes:
        workload = generate_workload(size, spec.tensors, spec.seed)
        selections = nested_selections(sorted(workload), spec.fractions, spec.seed)
        for fraction in spec.fractions:
            selected = selections[fraction]
            config = _config_for(selected, master, signer) if fraction > 0 else None

            def do_serialize():
                return serialize.serialize_bytes(workload, config)

            blob = do_serialize()  # warm-up, also reused for file phases
            header_bytes = int.from_bytes(blob[:8], "little")
            body_bytes = len(blob) - 8 - header_bytes

            serialize_times = []
            for _ in range(spec.repeats):
                t0 = clock()
                do_serialize()
                serialize_times.append(clock() - t0)

            with tempfile.TemporaryDirectory() as tmp:
                path = os.path.join(tmp, "bench.ct")
                with open(path, "wb") as f:
                    f.write(blob)
                options = load.OpenOptions()
                options.resolution.sign_key = signer.public
                options.resolution.master_key = master.bytes

                open_times, first_times, second_times = [], [], []
                names = sorted(workload)
                for i in range(spec.repeats + 1):  # first lap is warm-up
                    t0 = clock()
                    handle = load.open(path, options)
                    t_open = clock() - t0
                    t0 = clock()
                    for name in names:
                        handle.get_tensor(name)
                    t_first = clock() - t0
                    t0 = clock()
                    for name in names:
                        handle.get_tensor(name)
                    t_second = clock() - t0
                    handle.close()
                    if i > 0:
                        open_times.append(t_open)
                        first_times.append(t_first)
                        second_times.append(t_second)

            for phase, times in (
                (SERIALIZE, serialize_times),
                (OPEN, open_times),
                (FIRST_ACCESS, first_times),
                (SECOND_ACCESS, second_times),
            ):
                report.rows.append(
                    BenchRow(
                        phase=phase,
                        tensor_bytes=size,
                        encrypted_fraction=fraction,
                        encrypted_count=len(selected),
                        mean=statistics.fmean(times),
                        stddev=statistics.pstdev(times) if len(times) > 1 else 0.0,
                        n=len(times),
                        header_bytes=header_bytes,
                        body_bytes=body_bytes,
                    )
                )
    return report


def _linear_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    sxx = sum((x - mean_x) ** 2 for x in xs)
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    syy = sum((y - mean_y) ** 2 for y in ys)
    if syy == 0:
        return 1.0
    if sxx == 0:
        return 0.0
    return (sxy * sxy) / (sxx * syy)


MONOTONE_SLACK = 0.10
HEADER_LINEAR_R2 = 0.90


def assert_trends(report: BenchReport) -> list[Finding]:
    """Scale-free shape checks: serialization time is nondecreasing in the
    encrypted fraction (10% noise slack), re-access beats first access for
    encrypted files, and header growth is linear in the encrypted count."""
    findings: list[Finding] = []
    sizes = sorted({r.tensor_bytes for r in report.rows})
    for size in sizes:
        rows = [r for r in report.rows if r.tensor_bytes == size]
        ser = sorted((r for r in rows if r.phase == SERIALIZE), key=lambda r: r.encrypted_fraction)

        monotone = True
        detail = []
        for prev, cur in zip(ser, ser[1:]):
            if cur.mean < prev.mean * (1 - MONOTONE_SLACK):
                monotone = False
                detail.append(
                    f"{cur.encrypted_fraction} ({cur.mean:.6f}s) < {prev.encrypted_fraction} ({prev.mean:.6f}s)"
                )
        findings.append(
            Finding(
                name=f"serialize_monotone[{size}]",
                passed=monotone,
                detail="; ".join(detail) or f"{len(ser)} fractions nondecreasing",
            )
        )

        firsts = {r.encrypted_fraction: r for r in rows if r.phase == FIRST_ACCESS}
        seconds = {r.encrypted_fraction: r for r in rows if r.phase == SECOND_ACCESS}
        for fraction, first in sorted(firsts.items()):
            if fraction == 0.0 or first.encrypted_count == 0:
                continue
            second = seconds[fraction]
            passed = second.mean < first.mean
            findings.append(
                Finding(
                    name=f"decrypt_once[{size},{fraction}]",
                    passed=passed,
                    detail=f"first {first.mean:.6f}s vs second {second.mean:.6f}s",
                )
            )

        if len(ser) >= 3:
            xs = [float(r.encrypted_count) for r in ser]
            ys = [float(r.header_bytes) for r in ser]
            r2 = _linear_r2(xs, ys)
            findings.append(
                Finding(
                    name=f"header_linear[{size}]",
                    passed=r2 >= HEADER_LINEAR_R2,
                    detail=f"R^2 = {r2:.4f}",
                )
            )
    return findings
