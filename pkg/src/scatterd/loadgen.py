"""Benchmark harness: concurrent HTTP load, latency aggregation, process sampling.

samples.csv   requestIndex,startMs,latencyMs,bytes,httpStatus
resources.csv timestampMs,role,pid,cpuPct,memPct

Rows starting with ``#`` carry metadata (warm-up/cool-down counts, vanished
processes) and are skipped by the CSV readers below.
"""

from __future__ import annotations

import asyncio
import csv
import math
import statistics
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import psutil

SAMPLES_HEADER = ["requestIndex", "startMs", "latencyMs", "bytes", "httpStatus"]
RESOURCES_HEADER = ["timestampMs", "role", "pid", "cpuPct", "memPct"]


class SchemaMismatch(ValueError):
    pass


@dataclass
class LoadProfile:
    target_urls: list[str]
    concurrency: int = 1
    repetitions: int = 20
    warmup: int = 0
    cooldown: int = 0
    gzip: bool = False
    timeout_s: float = 600.0

    def __post_init__(self):
        if not self.target_urls:
            raise ValueError("at least one target URL required")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.repetitions <= self.warmup + self.cooldown:
            raise ValueError("repetitions must exceed warmup + cooldown")


@dataclass
class LatencySample:
    request_index: int
    start_ms: float
    latency_ms: float
    bytes: int
    http_status: int


@dataclass
class LoadReport:
    mean_ms: float
    median_ms: float
    p95_ms: float
    throughput_rps: float
    error_count: int
    aggregated: int
    max_inflight: int = 0

    def to_json(self) -> dict:
        return {
            "meanMs": self.mean_ms,
            "medianMs": self.median_ms,
            "p95Ms": self.p95_ms,
            "throughputRps": self.throughput_rps,
            "errorCount": self.error_count,
            "aggregated": self.aggregated,
            "maxInflight": self.max_inflight,
        }


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile."""
    if not values:
        return math.nan
    ordered = sorted(values)
    k = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[k - 1]


def aggregate(samples: Iterable[LatencySample], warmup: int = 0, cooldown: int = 0) -> LoadReport:
    ordered = sorted(samples, key=lambda s: s.request_index)
    window = ordered[warmup : len(ordered) - cooldown if cooldown else None]
    ok = [s for s in window if s.http_status == 200]
    errors = len(window) - len(ok)
    if not ok:
        return LoadReport(math.nan, math.nan, math.nan, 0.0, errors, 0)
    lat = [s.latency_ms for s in ok]
    span_ms = max(s.start_ms + s.latency_ms for s in ok) - min(s.start_ms for s in ok)
    return LoadReport(
        mean_ms=statistics.fmean(lat),
        median_ms=statistics.median(lat),
        p95_ms=percentile(lat, 95),
        throughput_rps=len(ok) / (span_ms / 1000.0) if span_ms > 0 else math.inf,
        error_count=errors,
        aggregated=len(ok),
    )


def write_samples(path: str | Path, samples: list[LatencySample], warmup: int = 0, cooldown: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLES_HEADER)
        for s in sorted(samples, key=lambda s: s.request_index):
            w.writerow([s.request_index, f"{s.start_ms:.3f}", f"{s.latency_ms:.3f}", s.bytes, s.http_status])
        fh.write(f"# warmup={warmup},cooldown={cooldown}\n")


def read_samples(path: str | Path) -> tuple[list[LatencySample], int, int]:
    warmup = cooldown = 0
    rows = []
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        if header != SAMPLES_HEADER:
            raise SchemaMismatch(f"{path}: header {header} != {SAMPLES_HEADER}")
        for line in fh:
            if line.startswith("#"):
                meta = dict(kv.split("=", 1) for kv in line[1:].strip().split(",") if "=" in kv)
                warmup = int(meta.get("warmup", warmup))
                cooldown = int(meta.get("cooldown", cooldown))
                continue
            if not line.strip():
                continue
            i, start, lat, nbytes, status = next(csv.reader([line]))
            rows.append(LatencySample(int(i), float(start), float(lat), int(nbytes), int(status)))
    return rows, warmup, cooldown


def aggregate_csv(path: str | Path) -> LoadReport:
    samples, warmup, cooldown = read_samples(path)
    return aggregate(samples, warmup, cooldown)


async def run_load(profile: LoadProfile, out_csv: str | Path | None = None) -> LoadReport:
    """Keep ``concurrency`` requests in flight until ``repetitions`` are issued."""
    import aiohttp

    samples: list[LatencySample] = []
    counter = iter(range(profile.repetitions))
    inflight = 0
    max_inflight = 0
    t0 = time.perf_counter()
    headers = {"Accept-Encoding": "gzip" if profile.gzip else "identity"}
    timeout = aiohttp.ClientTimeout(total=profile.timeout_s)
    connector = aiohttp.TCPConnector(limit=profile.concurrency, force_close=False)

    async with aiohttp.ClientSession(connector=connector, timeout=timeout, auto_decompress=False) as session:

        async def worker():
            nonlocal inflight, max_inflight
            for i in counter:
                url = profile.target_urls[i % len(profile.target_urls)]
                inflight += 1
                max_inflight = max(max_inflight, inflight)
                start = time.perf_counter()
                nbytes, status = 0, 0
                try:
                    async with session.get(url, headers=headers) as resp:
                        status = resp.status
                        async for chunk in resp.content.iter_any():
                            nbytes += len(chunk)
                except (aiohttp.ClientError, asyncio.TimeoutError):
                    status = 0  # transport failure or truncated body
                end = time.perf_counter()
                inflight -= 1
                samples.append(LatencySample(i, (start - t0) * 1000.0, (end - start) * 1000.0, nbytes, status))

        await asyncio.gather(*(worker() for _ in range(profile.concurrency)))

    if out_csv is not None:
        write_samples(out_csv, samples, profile.warmup, profile.cooldown)
    report = aggregate(samples, profile.warmup, profile.cooldown)
    report.max_inflight = max_inflight
    return report


def compare_runs(baseline_csv: str | Path, candidate_csv: str | Path) -> dict:
    """Candidate/baseline ratios of mean latency and throughput."""
    base = aggregate_csv(baseline_csv)
    cand = aggregate_csv(candidate_csv)
    return {
        "baseline": base.to_json(),
        "candidate": cand.to_json(),
        "meanLatencyRatio": cand.mean_ms / base.mean_ms,
        "throughputRatio": cand.throughput_rps / base.throughput_rps,
    }


# -- resource sampling ---------------------------------------------------------


class ResourceSampler:
    """Per-process CPU% (100 = one core) and memory% at a fixed interval."""

    def __init__(self, targets: list[tuple[str, int]], interval_ms: int = 2000) -> None:
        self.targets = targets
        self.interval = interval_ms / 1000.0
        self.rows: list[list] = []
        self.vanished: list[tuple[str, int, int]] = []
        self._procs: dict[int, tuple[str, psutil.Process]] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _prime(self) -> None:
        for role, pid in self.targets:
            try:
                p = psutil.Process(pid)
                p.cpu_percent(None)
                self._procs[pid] = (role, p)
            except psutil.NoSuchProcess:
                self.vanished.append((role, pid, int(time.time() * 1000)))

    def _tick(self) -> None:
        now = int(time.time() * 1000)
        for pid, (role, p) in list(self._procs.items()):
            try:
                with p.oneshot():
                    cpu = p.cpu_percent(None)
                    mem = p.memory_percent()
                if p.status() == psutil.STATUS_ZOMBIE:
                    raise psutil.NoSuchProcess(pid)
            except psutil.NoSuchProcess:
                del self._procs[pid]
                self.vanished.append((role, pid, now))
                continue
            self.rows.append([now, role, pid, round(cpu, 2), round(mem, 4)])

    def run(self, duration_ms: int) -> list[list]:
        self._prime()
        ticks = int(duration_ms // (self.interval * 1000))
        start = time.monotonic()
        for k in range(1, ticks + 1):
            delay = start + k * self.interval - time.monotonic()
            if self._stop.wait(max(0.0, delay)):
                break
            self._tick()
        return self.rows

    def start(self) -> "ResourceSampler":
        self._prime()

        def loop():
            start = time.monotonic()
            k = 1
            while not self._stop.wait(max(0.0, start + k * self.interval - time.monotonic())):
                self._tick()
                k += 1

        self._thread = threading.Thread(target=loop, name="resource-sampler", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> list[list]:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        return self.rows

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESOURCES_HEADER)
            w.writerows(self.rows)
            for role, pid, ts in self.vanished:
                fh.write(f"# vanished role={role},pid={pid},timestampMs={ts}\n")


def sample_resources(targets: list[tuple[str, int]], interval_ms: int, duration_ms: int, out: str | Path | None = None) -> list[list]:
    sampler = ResourceSampler(targets, interval_ms)
    rows = sampler.run(duration_ms)
    if out is not None:
        sampler.write(out)
    return rows


def read_resources(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != RESOURCES_HEADER:
        raise SchemaMismatch(f"{path}: header {reader.fieldnames} != {RESOURCES_HEADER}")
    return [
        {"timestampMs": int(r["timestampMs"]), "role": r["role"], "pid": int(r["pid"]),
         "cpuPct": float(r["cpuPct"]), "memPct": float(r["memPct"])}
        for r in reader
    ]


def mean_cpu_by_pid(rows: list[dict]) -> dict[tuple[str, int], float]:
    acc: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        acc.setdefault((r["role"], r["pid"]), []).append(r["cpuPct"])
    return {k: statistics.fmean(v) for k, v in acc.items()}


def targets_from_state(config_path: str | Path) -> list[tuple[str, int]]:
    """(role, pid) of the controller and every live component of a running cluster."""
    from .controller import read_state

    state = read_state(config_path)
    if state is None:
        raise FileNotFoundError(f"no cluster state next to {config_path}")
    targets = [("controller", state["controllerPid"])]
    targets += [(c["role"], c["pid"]) for c in state["components"] if c.get("pid")]
    return targets
