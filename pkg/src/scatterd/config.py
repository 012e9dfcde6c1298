"""Cluster configuration: schema, defaults, validation."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, Any] = {
    "splitThreshold": 1000,
    "defaultInflight": 10,
    "heartbeatIntervalMs": 1000,
    "missedHeartbeatsBeforeRestart": 2,
    "dataDir": "data",
    "backendConcurrency": None,
    "statsPortOffset": 1000,
    "restartBackoffBaseMs": 500,
    "restartBackoffCapMs": 30000,
    "maxConsecutiveRestarts": 5,
    "stableAfterMs": 5000,
    "startupTimeoutMs": 20000,
    "stopTimeoutMs": 10000,
}

_POSITIVE_INTS = (
    "splitThreshold",
    "defaultInflight",
    "heartbeatIntervalMs",
    "missedHeartbeatsBeforeRestart",
    "restartBackoffBaseMs",
    "restartBackoffCapMs",
    "maxConsecutiveRestarts",
    "startupTimeoutMs",
    "stopTimeoutMs",
)


class ConfigInvalid(ValueError):
    def __init__(self, errors: list[str]) -> None:
        self.errors = errors
        super().__init__("invalid cluster config:\n  " + "\n  ".join(errors))


def _port(value: Any) -> int | None:
    if isinstance(value, bool):
        return None
    try:
        p = int(value)
    except (TypeError, ValueError):
        return None
    return p if 0 < p < 65536 else None


def normalize_config(raw: dict[str, Any]) -> dict[str, Any]:
    """Fill defaults and check every field; all violations are reported together.

    The result is again a valid input, and normalizing it is a no-op.
    """
    if not isinstance(raw, dict):
        raise ConfigInvalid(["config must be a JSON object"])
    cfg = copy.deepcopy(raw)
    errors: list[str] = []
    for key, value in DEFAULTS.items():
        cfg.setdefault(key, value)

    sched = cfg.get("schedulerEndpoint")
    if not isinstance(sched, dict):
        errors.append("schedulerEndpoint: required object {host, port}")
        sched = None
    else:
        sched.setdefault("host", "127.0.0.1")
        if _port(sched.get("port")) is None:
            errors.append(f"schedulerEndpoint.port: invalid port {sched.get('port')!r}")
        else:
            sched["port"] = _port(sched["port"])

    # every listening endpoint, so collisions can name both owners
    owners: dict[tuple[str, int], str] = {}

    def claim(host: str, port: int, who: str) -> None:
        key = (host, port)
        if key in owners:
            errors.append(f"duplicate endpoint {host}:{port} used by {owners[key]} and {who}")
        else:
            owners[key] = who

    if sched is not None and _port(sched.get("port")):
        claim(sched["host"], sched["port"], "schedulerEndpoint")

    offset = cfg["statsPortOffset"]
    if offset is not None and (isinstance(offset, bool) or not isinstance(offset, int) or offset < 0):
        errors.append(f"statsPortOffset: non-negative integer or null expected, got {offset!r}")
        offset = None

    for section, fields in (("frontends", ("port", "httpPort")), ("backends", ("port",))):
        entries = cfg.get(section)
        if not isinstance(entries, list) or not entries:
            errors.append(f"{section}: at least one entry required")
            cfg[section] = entries if isinstance(entries, list) else []
            continue
        for i, entry in enumerate(entries):
            who = f"{section}[{i}]"
            if not isinstance(entry, dict):
                errors.append(f"{who}: must be an object")
                continue
            entry.setdefault("host", "127.0.0.1")
            if section == "backends":
                entry.setdefault("external", False)
                if not isinstance(entry["external"], bool):
                    errors.append(f"{who}.external: boolean expected")
            for f in fields:
                p = _port(entry.get(f))
                if p is None:
                    errors.append(f"{who}.{f}: invalid port {entry.get(f)!r}")
                    continue
                entry[f] = p
                claim(entry["host"], p, f"{who}.{f}" if f != "port" else who)
            if section == "backends" and offset and _port(entry.get("port")):
                sp = entry["port"] + offset
                if sp >= 65536:
                    errors.append(f"{who}: stats port {sp} out of range")
                else:
                    claim(entry["host"], sp, f"{who}.statsPort")

    for key in _POSITIVE_INTS:
        v = cfg.get(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            errors.append(f"{key}: positive integer expected, got {v!r}")
    sa = cfg.get("stableAfterMs")
    if isinstance(sa, bool) or not isinstance(sa, int) or sa < 0:
        errors.append(f"stableAfterMs: non-negative integer expected, got {sa!r}")
    bc = cfg.get("backendConcurrency")
    if bc is not None and (isinstance(bc, bool) or not isinstance(bc, int) or bc < 1):
        errors.append(f"backendConcurrency: positive integer or null expected, got {bc!r}")
    if not isinstance(cfg.get("dataDir"), str) or not cfg["dataDir"]:
        errors.append("dataDir: path string expected")

    if errors:
        raise ConfigInvalid(errors)
    return cfg


@dataclass
class Endpoint:
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass
class ClusterConfig:
    scheduler: Endpoint
    frontends: list[dict[str, Any]]
    backends: list[dict[str, Any]]
    split_threshold: int
    default_inflight: int
    heartbeat_interval_ms: int
    missed_heartbeats: int
    data_dir: str
    backend_concurrency: int | None
    stats_port_offset: int | None
    backoff_base_ms: int
    backoff_cap_ms: int
    max_consecutive_restarts: int
    stable_after_ms: int
    startup_timeout_ms: int
    stop_timeout_ms: int
    raw: dict[str, Any]
    path: str | None = None

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | os.PathLike | None = None) -> "ClusterConfig":
        c = normalize_config(raw)
        data_dir = Path(c["dataDir"])
        if base_dir is not None and not data_dir.is_absolute():
            data_dir = Path(base_dir) / data_dir
        return cls(
            scheduler=Endpoint(c["schedulerEndpoint"]["host"], c["schedulerEndpoint"]["port"]),
            frontends=c["frontends"],
            backends=c["backends"],
            split_threshold=c["splitThreshold"],
            default_inflight=c["defaultInflight"],
            heartbeat_interval_ms=c["heartbeatIntervalMs"],
            missed_heartbeats=c["missedHeartbeatsBeforeRestart"],
            data_dir=str(data_dir),
            backend_concurrency=c["backendConcurrency"],
            stats_port_offset=c["statsPortOffset"],
            backoff_base_ms=c["restartBackoffBaseMs"],
            backoff_cap_ms=c["restartBackoffCapMs"],
            max_consecutive_restarts=c["maxConsecutiveRestarts"],
            stable_after_ms=c["stableAfterMs"],
            startup_timeout_ms=c["startupTimeoutMs"],
            stop_timeout_ms=c["stopTimeoutMs"],
            raw=c,
        )


def load_config(path: str | os.PathLike) -> ClusterConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid([f"{p}: not valid JSON: {exc}"]) from None
    cfg = ClusterConfig.from_dict(raw, base_dir=p.resolve().parent)
    cfg.path = str(p.resolve())
    return cfg


def validate_config(path: str | os.PathLike) -> dict[str, Any]:
    """Normalized config document for the file at ``path``."""
    return load_config(path).raw


def state_path(config_path: str | os.PathLike) -> Path:
    p = Path(config_path).resolve()
    return p.with_name(p.name + ".state.json")
