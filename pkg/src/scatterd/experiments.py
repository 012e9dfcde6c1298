"""Reproducible benchmark experiments over a local multi-process cluster.

Each function starts its own cluster through the controller, drives it with
the load generator and returns plain dicts that are also written as JSON
next to the CSV artifacts in ``workdir``.
"""

from __future__ import annotations

import http.client
import json
import logging
import math
import os
import statistics
import threading
import time
import urllib.request
from datetime import date, timedelta
from pathlib import Path
from typing import Any

from .dataset import DocumentStore, GenerationConfig, cloud_index_handler, generate
from .harness import LocalCluster
from .loadgen import LoadProfile, ResourceSampler, mean_cpu_by_pid, read_resources, run_load

log = logging.getLogger(__name__)

START = date(2024, 1, 1)
MONTH = (START, START + timedelta(days=30))  # 60,000 docs
QUARTER = (START, START + timedelta(days=90))  # 180,000 docs


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def ensure_dataset(data_dir: str | os.PathLike, seed: int = 42, days: int = 90, docs_per_day: int = 2000) -> DocumentStore:
    """Generate the store unless an identical one is already there."""
    path = Path(data_dir)
    marker = path / "generation.json"
    want = {"seed": seed, "from": START.isoformat(), "days": days, "docsPerDay": docs_per_day}
    if marker.exists() and json.loads(marker.read_text()) == want:
        return DocumentStore(path)
    generate(GenerationConfig(seed, START, START + timedelta(days=days), docs_per_day=docs_per_day), path)
    marker.write_text(json.dumps(want))
    return DocumentStore(path)


def query_string(span: tuple[date, date], **extra: Any) -> str:
    parts = [f"from={span[0].isoformat()}", f"to={span[1].isoformat()}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return "&".join(parts)


def serial_oracle(store: DocumentStore, span: tuple[date, date], **params: Any) -> list[str]:
    """Single-process handler run over the whole range, canonicalized and sorted."""
    out: list[dict] = []
    cloud_index_handler(store, {"from": span[0].isoformat(), "to": span[1].isoformat(), **params}, out.append)
    return canonical(out)


def canonical(records) -> list[str]:
    return sorted(json.dumps(r, sort_keys=True) for r in records)


def http_get(url: str, gzip: bool = False, timeout: float = 600.0) -> tuple[int, dict[str, str], bytes]:
    req = urllib.request.Request(url, headers={"Accept-Encoding": "gzip" if gzip else "identity"})
    with urllib.request.urlopen(req, timeout=timeout) as r:
        return r.status, dict(r.headers), r.read()


def ndjson_canonical(body: bytes) -> list[str]:
    return canonical(json.loads(line) for line in body.decode("utf-8").splitlines())


def _save(workdir: Path, name: str, result: Any) -> None:
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / f"{name}.json").write_text(json.dumps(result, indent=2))


# -- experiments -------------------------------------------------------------------


def oracle_equivalence(store: DocumentStore, workdir: str | os.PathLike, backends=(1, 2, 4), span=MONTH) -> list[dict]:
    """Merged output vs the serial oracle, once per back-end count."""
    workdir = Path(workdir)
    expected = serial_oracle(store, span)
    results = []
    for n in backends:
        with LocalCluster(workdir / f"oracle-{n}", store.path, backends=n) as cluster:
            t0 = time.monotonic()
            status, headers, body = http_get(f"{cluster.urls[0]}/api/cloud-index?{query_string(span)}")
            elapsed = time.monotonic() - t0
        got = ndjson_canonical(body) if status == 200 else []
        results.append({
            "backends": n,
            "status": status,
            "subtasks": int(headers.get("X-Subtasks", 0)),
            "records": len(got),
            "expected": len(expected),
            "equal": got == expected,
            "seconds": round(elapsed, 3),
        })
    _save(workdir, "oracle", results)
    return results


def gzip_integrity(store: DocumentStore, workdir: str | os.PathLike, span=MONTH) -> dict:
    import gzip

    workdir = Path(workdir)
    with LocalCluster(workdir / "gzip", store.path, backends=1) as cluster:
        url = f"{cluster.urls[0]}/api/cloud-index?{query_string(span)}"
        s1, h1, plain = http_get(url)
        s2, h2, packed = http_get(url, gzip=True)
    result = {
        "identityBytes": len(plain),
        "gzipBytes": len(packed),
        "contentEncoding": h2.get("Content-Encoding"),
        "equal": s1 == s2 == 200 and gzip.decompress(packed) == plain,
    }
    _save(workdir, "gzip", result)
    return result


def tune_work_factor(store: DocumentStore, workdir: str | os.PathLike, target_s: float = 5.0, span=QUARTER,
                     start: int = 1, rounds: int = 4) -> dict:
    """Smallest tried workFactor whose 1-backend request over ``span`` takes >= target_s."""
    workdir = Path(workdir)
    wf = start
    trials = []
    with LocalCluster(workdir / "tune", store.path, backends=1) as cluster:
        url = f"{cluster.urls[0]}/api/cloud-index?"
        http_get(url + query_string((span[0], span[0] + timedelta(days=1))))  # warm caches
        for _ in range(rounds):
            t0 = time.monotonic()
            status, _, _ = http_get(url + query_string(span, workFactor=wf))
            elapsed = time.monotonic() - t0
            trials.append({"workFactor": wf, "seconds": round(elapsed, 3), "status": status})
            if elapsed >= target_s:
                break
            wf = max(wf + 1, math.ceil(wf * 1.15 * target_s / elapsed))
    result = {"workFactor": wf, "targetSeconds": target_s, "trials": trials}
    _save(workdir, "tune", result)
    return result


def stress(store: DocumentStore, workdir: str | os.PathLike, backends: int, work_factor: int = 1,
           repetitions: int = 20, warmup: int = 1, cooldown: int = 1, concurrency: int = 1,
           span=QUARTER, monitor_interval_ms: int | None = 1000) -> dict:
    """Repeated identical requests against an ``backends``-wide cluster; optional resource sampling."""
    import asyncio

    workdir = Path(workdir) / f"stress-{backends}b-c{concurrency}"
    with LocalCluster(workdir, store.path, backends=backends) as cluster:
        url = f"{cluster.urls[0]}/api/cloud-index?{query_string(span, workFactor=work_factor)}"
        sampler = ResourceSampler(cluster.targets(), monitor_interval_ms).start() if monitor_interval_ms else None
        profile = LoadProfile([url], concurrency=concurrency, repetitions=repetitions, warmup=warmup, cooldown=cooldown)
        try:
            report = asyncio.run(run_load(profile, workdir / "samples.csv"))
        finally:
            if sampler is not None:
                sampler.stop()
                sampler.write(workdir / "resources.csv")
    result: dict[str, Any] = {
        "backends": backends,
        "workFactor": work_factor,
        "concurrency": concurrency,
        "repetitions": repetitions,
        "report": report.to_json(),
        "samplesCsv": str(workdir / "samples.csv"),
    }
    if sampler is not None:
        result["resourcesCsv"] = str(workdir / "resources.csv")
        result["cpu"] = cpu_profile(workdir / "resources.csv")
    _save(workdir, "result", result)
    return result


def cpu_profile(resources_csv: str | os.PathLike) -> dict:
    """Mean cpuPct per process, grouped by role."""
    by_pid = mean_cpu_by_pid(read_resources(resources_csv))
    roles: dict[str, list[float]] = {}
    for (role, _pid), mean in sorted(by_pid.items()):
        roles.setdefault(role, []).append(round(mean, 2))
    return roles


def load_balance_check(cpu: dict[str, list[float]]) -> dict:
    backends = cpu.get("backend", [])
    frontend = statistics.fmean(cpu.get("frontend", [0.0]))
    mean_be = statistics.fmean(backends) if backends else 0.0
    spread = max(abs(b - mean_be) / mean_be for b in backends) if mean_be else math.inf
    return {
        "frontendCpu": round(frontend, 2),
        "meanBackendCpu": round(mean_be, 2),
        "frontendToBackend": round(frontend / mean_be, 3) if mean_be else math.inf,
        "maxBackendDeviation": round(spread, 3),
    }


def crash_recovery(store: DocumentStore, workdir: str | os.PathLike, trials: int = 10, backends: int = 4,
                   span=MONTH, deadline_s: float = 5.0) -> list[dict]:
    """Kill one back-end per trial while a background soak runs; time its return, check the next result."""
    import signal

    workdir = Path(workdir)
    expected = serial_oracle(store, span)
    results = []
    with LocalCluster(workdir / "recovery", store.path, backends=backends) as cluster:
        base = f"{cluster.urls[0]}/api/cloud-index?"
        stop = threading.Event()
        soak_stats = {"ok": 0, "failed": 0}

        def soak():
            day = (span[0], span[0] + timedelta(days=1))
            while not stop.is_set():
                try:
                    status, _, _ = http_get(base + query_string(day), timeout=30)
                    soak_stats["ok" if status == 200 else "failed"] += 1
                except (OSError, http.client.HTTPException):
                    # requests cut short by the kill are expected to fail
                    soak_stats["failed"] += 1
                stop.wait(0.2)

        soaker = threading.Thread(target=soak, daemon=True)
        soaker.start()
        try:
            for trial in range(trials):
                # rotate victims so every kill lands on a component past its stability window
                index = trial % backends
                name = f"backend-{index}"
                comp = next(c for c in cluster.components() if c["name"] == name)
                old_pid = comp["pid"]
                os.kill(old_pid, signal.SIGKILL)
                t0 = time.monotonic()
                try:
                    cluster.wait_for(
                        lambda st: any(c["name"] == name and c["status"] == "running" and c["pid"] != old_pid
                                       for c in st["components"]),
                        timeout=30,
                    )
                    restart_s = time.monotonic() - t0
                except TimeoutError:
                    restart_s = math.inf
                status, headers, body = http_get(base + query_string(span))
                got = ndjson_canonical(body) if status == 200 else []
                results.append({
                    "trial": trial,
                    "victim": name,
                    "restartSeconds": round(restart_s, 3),
                    "withinDeadline": restart_s <= deadline_s,
                    "subtasks": int(headers.get("X-Subtasks", 0)),
                    "equal": got == expected,
                })
                time.sleep(1.0)
        finally:
            stop.set()
            soaker.join(30)
    _save(workdir, "recovery", {"trials": results, "soak": soak_stats})
    return results


def main(args) -> int:
    """Entry for ``scatterd experiment``."""
    store = ensure_dataset(args.data_dir)
    workdir = Path(args.workdir)
    name = args.name
    if name == "oracle":
        out: Any = oracle_equivalence(store, workdir)
    elif name == "gzip":
        out = gzip_integrity(store, workdir)
    elif name == "tune":
        out = tune_work_factor(store, workdir)
    elif name == "scaling":
        wf = args.work_factor or tune_work_factor(store, workdir)["workFactor"]
        runs = {n: stress(store, workdir, n, wf, repetitions=args.repetitions) for n in args.backends}
        base = runs[args.backends[0]]["report"]["meanMs"]
        out = {n: {"meanMs": r["report"]["meanMs"], "ratioToFirst": r["report"]["meanMs"] / base, "cpu": r.get("cpu")}
               for n, r in runs.items()}
    elif name == "load":
        runs = {n: stress(store, workdir, n, args.work_factor or 1, repetitions=args.repetitions,
                          concurrency=args.concurrency, span=MONTH) for n in args.backends}
        out = {n: r["report"] for n, r in runs.items()}
    elif name == "recovery":
        out = crash_recovery(store, workdir)
    else:
        raise ValueError(name)
    print(json.dumps(out, indent=2, default=str))
    return 0
