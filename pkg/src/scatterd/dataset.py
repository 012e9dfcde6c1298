"""Synthetic cloud-index measurement store and the cloud-index use case.

On disk a store is a directory holding one NDJSON partition per UTC day
(``YYYY-MM-DD.ndjson``) and ``index.json`` mapping day -> document count.
Each document is one measurement: a geolocated, timestamped 3 x L array of
cloud-index values (channel-major) over L altitude levels.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from .registry import CONCURRENT, ITERATIVE, MODES, EmptyRange, InvalidParams, SubTask, UseCase

CHANNELS = 3
DEFAULT_THRESHOLD = 1.8
FORMATS = ("flat", "grouped")
INDEX_FILE = "index.json"
MAX_WORK_FACTOR = 100_000


class MissingPartition(FileNotFoundError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    seed: int
    start_date: date
    end_date: date  # exclusive
    docs_per_day: int = 2000
    levels: int = 31
    base_altitude_km: float = 6.0
    level_step_km: float = 2.0

    def __post_init__(self):
        if self.docs_per_day < 1:
            raise ValueError("docs_per_day must be >= 1")
        if self.end_date <= self.start_date:
            raise EmptyRange(f"end date {self.end_date} must be after start date {self.start_date}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    @property
    def altitudes_km(self) -> list[float]:
        return [self.base_altitude_km + i * self.level_step_km for i in range(self.levels)]


def day_range(start: date, end: date) -> list[date]:
    return [start + timedelta(days=i) for i in range((end - start).days)]


def _day_documents(cfg: GenerationConfig, day: date) -> list[dict[str, Any]]:
    # one independent stream per (seed, day): partitions can be regenerated alone
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, day.toordinal()])
    n, levels = cfg.docs_per_day, cfg.levels
    alts = cfg.altitudes_km
    seconds = np.sort(rng.integers(0, 86_400_000, size=n)) / 1000.0
    lat = np.round(rng.uniform(-90.0, 90.0, size=n), 4)
    lon = np.round(rng.uniform(-180.0, 180.0, size=n), 4)
    # low index = cloud; mean rises with altitude, clear-sky profiles sit high
    rel = np.linspace(0.0, 1.0, levels)
    mean = 1.0 + 7.0 * rel
    clear = rng.random(n) < 0.3
    offset = np.where(clear, rng.uniform(2.0, 4.0, size=n), rng.uniform(-1.0, 1.5, size=n))
    noise = rng.normal(0.0, 0.8, size=(n, CHANNELS, levels))
    ci = np.clip(mean[None, None, :] + offset[:, None, None] + noise, 0.0, 10.0)
    ci = np.round(ci, 2)

    midnight = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
    docs = []
    for i in range(n):
        ts = midnight + timedelta(seconds=float(seconds[i]))
        docs.append(
            {
                "id": f"{day.isoformat()}-{i:05d}",
                "time": ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z",
                "lat": float(lat[i]),
                "lon": float(lon[i]),
                "altitudesKm": alts,
                "cloudIndex": ci[i].tolist(),
            }
        )
    return docs


def generate(cfg: GenerationConfig, data_dir: str | os.PathLike) -> dict[str, int]:
    """Write the store; returns the count index. Output is byte-stable per config."""
    out = Path(data_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        index: dict[str, int] = {}
        for day in day_range(cfg.start_date, cfg.end_date):
            docs = _day_documents(cfg, day)
            path = out / f"{day.isoformat()}.ndjson"
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for d in docs:
                    fh.write(json.dumps(d, separators=(",", ":")))
                    fh.write("\n")
            os.replace(tmp, path)
            index[day.isoformat()] = len(docs)
        # merge with partitions already present so stores can be grown in pieces
        existing = _read_index(out) if (out / INDEX_FILE).exists() else {}
        existing.update(index)
        (out / INDEX_FILE).write_text(json.dumps(dict(sorted(existing.items())), indent=0) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return index


def _read_index(path: Path) -> dict[str, int]:
    with open(path / INDEX_FILE, encoding="utf-8") as fh:
        return {k: int(v) for k, v in json.load(fh).items()}


class DocumentStore:
    """Read-only view over a generated store directory."""

    def __init__(self, data_dir: str | os.PathLike) -> None:
        self.path = Path(data_dir)
        self.index = _read_index(self.path)

    def days(self) -> list[str]:
        return sorted(self.index)

    def count(self, start: date, end: date) -> int:
        return sum(self.index.get(d.isoformat(), 0) for d in day_range(start, end))

    def day_counts(self, start: date, end: date) -> list[tuple[date, int]]:
        return [(d, self.index.get(d.isoformat(), 0)) for d in day_range(start, end)]

    def covers(self, start: date, end: date) -> bool:
        return all(d.isoformat() in self.index for d in day_range(start, end))

    def query_range(self, start: date, end: date) -> Iterator[dict[str, Any]]:
        """Measurements with start <= day < end, ordered by (day, time)."""
        if start >= end:
            raise EmptyRange(f"{start} >= {end}")
        for day in day_range(start, end):
            path = self.path / f"{day.isoformat()}.ndjson"
            try:
                fh = open(path, encoding="utf-8")
            except FileNotFoundError:
                raise MissingPartition(str(path)) from None
            with fh:
                for line in fh:
                    yield json.loads(line)


# -- processing ----------------------------------------------------------------


def cloud_altitude(m: dict[str, Any], channel: int, threshold: float) -> float | None:
    """Cloud-top altitude: highest level whose index is strictly below threshold."""
    row = m["cloudIndex"][channel]
    alts = m["altitudesKm"]
    for i in range(len(row) - 1, -1, -1):
        if row[i] < threshold:
            return alts[i]
    return None


def smooth(row: list[float], passes: int) -> list[float]:
    """Three-point moving average with clamped edges, applied ``passes`` times."""
    cur = list(row)
    n = len(cur)
    if n < 3:
        return cur
    for _ in range(passes):
        prev = cur
        cur = [(prev[0] * 2 + prev[1]) / 3.0]
        for i in range(1, n - 1):
            cur.append((prev[i - 1] + prev[i] + prev[i + 1]) / 3.0)
        cur.append((prev[n - 2] + prev[n - 1] * 2) / 3.0)
    return cur


def _parse_day(value: Any, field_name: str) -> date:
    if isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value)[:10])
    except ValueError:
        raise InvalidParams(f"{field_name}: not an ISO date: {value!r}") from None


def normalize_params(raw: dict[str, Any]) -> dict[str, Any]:
    """Validate and fill defaults for cloud-index parameters (strings or typed)."""
    errors = []
    out: dict[str, Any] = {}
    for key in ("from", "to"):
        if key not in raw or raw[key] in (None, ""):
            errors.append(f"{key}: required")
            continue
        try:
            out[key] = _parse_day(raw[key], key).isoformat()
        except InvalidParams as exc:
            errors.append(str(exc))
    try:
        ch = int(raw.get("channel", 0))
        if ch not in range(CHANNELS):
            raise ValueError
        out["channel"] = ch
    except (TypeError, ValueError):
        errors.append(f"channel: must be one of 0, 1, 2, got {raw.get('channel')!r}")
    try:
        th = float(raw.get("threshold", DEFAULT_THRESHOLD))
        if not math.isfinite(th):
            raise ValueError
        out["threshold"] = th
    except (TypeError, ValueError):
        errors.append(f"threshold: must be a finite number, got {raw.get('threshold')!r}")
    fmt = raw.get("format", "flat")
    if fmt not in FORMATS:
        errors.append(f"format: must be flat or grouped, got {fmt!r}")
    out["format"] = fmt
    try:
        wf = int(raw.get("workFactor", 1))
        if not 1 <= wf <= MAX_WORK_FACTOR:
            raise ValueError
        out["workFactor"] = wf
    except (TypeError, ValueError):
        errors.append(f"workFactor: integer in [1, {MAX_WORK_FACTOR}] expected, got {raw.get('workFactor')!r}")
    if errors:
        raise InvalidParams("; ".join(errors))
    return out


def cloud_index_handler(store: DocumentStore, params: dict[str, Any], sink: Callable[[dict], None]) -> None:
    p = normalize_params(params)
    start, end = date.fromisoformat(p["from"]), date.fromisoformat(p["to"])
    if start > end:
        raise EmptyRange(f"{start} > {end}")
    if start == end:
        return
    channel, threshold, wf = p["channel"], p["threshold"], p["workFactor"]
    grouped = p["format"] == "grouped"
    group_day = None
    group: list[dict[str, Any]] = []
    for m in store.query_range(start, end):
        smooth(m["cloudIndex"][channel], wf)  # CPU dial only; output uses the raw row
        day = m["time"][:10]
        rec = {
            "day": day,
            "time": m["time"],
            "lat": m["lat"],
            "lon": m["lon"],
            "cloudAltitudeKm": cloud_altitude(m, channel, threshold),
        }
        if not grouped:
            sink(rec)
            continue
        if day != group_day and group:
            sink({"day": group_day, "records": group})
            group = []
        group_day = day
        group.append(rec)
    if grouped and group:
        sink({"day": group_day, "records": group})


def balanced_day_split(day_counts: list[tuple[date, int]], parts: int) -> list[tuple[date, date]]:
    """Cut consecutive days into at most ``parts`` contiguous, non-empty ranges.

    Each range takes days while its running count stays within the fair
    share of what remains; ranges are half-open [start, end).
    """
    n = len(day_counts)
    if n == 0:
        raise EmptyRange("no days to split")
    parts = max(1, min(parts, n))
    ranges = []
    i = 0
    remaining = sum(c for _, c in day_counts)
    for left in range(parts, 0, -1):
        if left == 1:
            j = n
        else:
            share = remaining / left
            j = i + 1
            acc = day_counts[i][1]
            # leave at least one day for each of the remaining ranges
            while j < n - (left - 1) and acc + day_counts[j][1] <= share:
                acc += day_counts[j][1]
                j += 1
        ranges.append((day_counts[i][0], day_counts[j - 1][0] + timedelta(days=1)))
        remaining -= sum(c for _, c in day_counts[i:j])
        i = j
    return ranges


def cloud_index_splitter(store: DocumentStore, query: dict[str, Any], allocation: list, mode: str) -> list[SubTask]:
    p = normalize_params(query)
    start, end = date.fromisoformat(p["from"]), date.fromisoformat(p["to"])
    if start >= end:
        raise EmptyRange(f"from {start} must be before to {end}")
    if mode not in MODES:
        raise InvalidParams(f"mode: {mode!r}")
    if mode == ITERATIVE:
        ranges = [(d, d + timedelta(days=1)) for d in day_range(start, end)]
    else:
        ranges = balanced_day_split(store.day_counts(start, end), max(1, len(allocation)))
    return [
        SubTask("cloud-index", {**p, "from": a.isoformat(), "to": b.isoformat()}, "", mode)
        for a, b in ranges
    ]


def cloud_index_estimate(store: DocumentStore, query: dict[str, Any]) -> int:
    p = normalize_params(query)
    return store.count(date.fromisoformat(p["from"]), date.fromisoformat(p["to"]))


def cloud_index_parse(store: DocumentStore | None, raw: dict[str, str]) -> dict[str, Any]:
    p = normalize_params(raw)
    if p["from"] >= p["to"]:
        raise EmptyRange(f"from {p['from']} must be before to {p['to']}")
    if store is not None:
        start, end = date.fromisoformat(p["from"]), date.fromisoformat(p["to"])
        if not store.covers(start, end):
            raise InvalidParams(f"range [{p['from']}, {p['to']}) extends outside the store")
    return p


def cloud_index_usecase(store: DocumentStore) -> UseCase:
    return UseCase(
        url="/cloud-index",
        name="cloud-index",
        splitter=lambda q, alloc, mode=CONCURRENT: cloud_index_splitter(store, q, alloc, mode),
        handler=lambda params, sink: cloud_index_handler(store, params, sink),
        estimate=lambda q: cloud_index_estimate(store, q),
        parse_query=lambda raw: cloud_index_parse(store, raw),
    )
