import filecmp
import json
from collections import Counter
from datetime import date, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scatterd.dataset import (
    DocumentStore,
    GenerationConfig,
    balanced_day_split,
    cloud_altitude,
    cloud_index_handler,
    cloud_index_parse,
    cloud_index_splitter,
    generate,
    normalize_params,
)
from scatterd.registry import EmptyRange, InvalidParams

D0 = date(2024, 1, 1)


def run_handler(store, **params):
    out = []
    cloud_index_handler(store, params, out.append)
    return out


def scan_oracle(m, channel, threshold):
    hits = [i for i in range(len(m["altitudesKm"])) if m["cloudIndex"][channel][i] < threshold]
    return m["altitudesKm"][max(hits)] if hits else None


# -- generation ----------------------------------------------------------------


def test_month_count_index(quarter_store):
    assert quarter_store.count(D0, D0 + timedelta(days=30)) == 60_000


def test_quarter_total(quarter_store):
    assert sum(quarter_store.index.values()) == 180_000
    assert len(quarter_store.days()) == 90


def test_generation_is_byte_identical(tmp_path):
    cfg = GenerationConfig(99, D0, D0 + timedelta(days=3), docs_per_day=150)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["2024-01-01.ndjson", "2024-01-02.ndjson", "2024-01-03.ndjson", "index.json"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []


def test_partitions_are_independent(tmp_path):
    # a day regenerated alone equals the same day from a longer run
    generate(GenerationConfig(5, D0, D0 + timedelta(days=4), docs_per_day=50), tmp_path / "long")
    generate(GenerationConfig(5, D0 + timedelta(days=2), D0 + timedelta(days=3), docs_per_day=50), tmp_path / "one")
    name = "2024-01-03.ndjson"
    assert (tmp_path / "long" / name).read_bytes() == (tmp_path / "one" / name).read_bytes()


def test_index_grows_when_extending(tmp_path):
    generate(GenerationConfig(5, D0, D0 + timedelta(days=2), docs_per_day=10), tmp_path)
    generate(GenerationConfig(5, D0 + timedelta(days=2), D0 + timedelta(days=3), docs_per_day=10), tmp_path)
    assert DocumentStore(tmp_path).count(D0, D0 + timedelta(days=3)) == 30


def test_document_shape(small_store):
    m = next(small_store.query_range(D0, D0 + timedelta(days=1)))
    assert set(m) == {"id", "time", "lat", "lon", "altitudesKm", "cloudIndex"}
    assert m["altitudesKm"] == [6.0 + 2 * i for i in range(31)]
    assert len(m["cloudIndex"]) == 3 and all(len(r) == 31 for r in m["cloudIndex"])
    assert all(0.0 <= v <= 10.0 for r in m["cloudIndex"] for v in r)
    assert -90 <= m["lat"] <= 90 and -180 <= m["lon"] <= 180


def test_generate_rejects_reversed():
    with pytest.raises(EmptyRange):
        GenerationConfig(1, D0, D0)


# -- store queries ---------------------------------------------------------------


def test_full_range_count_matches_index(small_store):
    days = small_store.days()
    start, end = date.fromisoformat(days[0]), date.fromisoformat(days[-1]) + timedelta(days=1)
    assert sum(1 for _ in small_store.query_range(start, end)) == sum(small_store.index.values())


def test_single_day_and_ordering(small_store):
    docs = list(small_store.query_range(D0 + timedelta(days=3), D0 + timedelta(days=5)))
    assert len(docs) == 400
    keys = [(d["time"][:10], d["time"]) for d in docs]
    assert keys == sorted(keys)
    assert {d["time"][:10] for d in docs} == {"2024-01-04", "2024-01-05"}


def test_reversed_range(small_store):
    with pytest.raises(EmptyRange):
        list(small_store.query_range(D0 + timedelta(days=2), D0))


# -- cloud altitude ------------------------------------------------------------------


def _measurement(rows):
    return {"altitudesKm": [6.0 + 2 * i for i in range(len(rows[0]))], "cloudIndex": rows}


def test_no_level_below_threshold():
    m = _measurement([[5.0] * 31] * 3)
    assert cloud_altitude(m, 0, 1.8) is None


def test_single_qualifying_level():
    for i0 in (0, 7, 30):
        row = [9.0] * 31
        row[i0] = 0.5
        assert cloud_altitude(_measurement([row, row, row]), 1, 1.8) == 6.0 + 2 * i0


def test_threshold_is_strict():
    row = [1.8] * 31
    assert cloud_altitude(_measurement([row] * 3), 0, 1.8) is None


@st.composite
def measurements(draw):
    n = draw(st.integers(1, 40))
    row = st.lists(st.floats(0, 10, allow_nan=False), min_size=n, max_size=n)
    return _measurement([draw(row) for _ in range(3)])


@settings(max_examples=500, deadline=None)
@given(m=measurements(), channel=st.integers(0, 2), threshold=st.floats(-1, 11, allow_nan=False))
def test_cloud_altitude_matches_scan(m, channel, threshold):
    assert cloud_altitude(m, channel, threshold) == scan_oracle(m, channel, threshold)


def test_generated_docs_match_scan(small_store):
    for m in small_store.query_range(D0, D0 + timedelta(days=1)):
        for ch in range(3):
            for th in (0.5, 1.8, 4.0):
                assert cloud_altitude(m, ch, th) == scan_oracle(m, ch, th)


# -- handler -------------------------------------------------------------------------


def test_handler_matches_serial_oracle(small_store):
    end = D0 + timedelta(days=2)
    out = run_handler(small_store, **{"from": "2024-01-01", "to": "2024-01-03", "channel": 2, "threshold": 2.5})
    expected = [
        {"day": m["time"][:10], "time": m["time"], "lat": m["lat"], "lon": m["lon"],
         "cloudAltitudeKm": scan_oracle(m, 2, 2.5)}
        for m in small_store.query_range(D0, end)
    ]
    assert out == expected


def test_threshold_below_minimum_gives_all_null(small_store):
    out = run_handler(small_store, **{"from": "2024-01-01", "to": "2024-01-02", "threshold": -1})
    assert len(out) == 200
    assert all(r["cloudAltitudeKm"] is None for r in out)


def test_work_factor_invariance(small_store):
    q = {"from": "2024-01-02", "to": "2024-01-03", "channel": 1}
    assert run_handler(small_store, **q, workFactor=1) == run_handler(small_store, **q, workFactor=50)


def test_grouped_single_day(small_store):
    out = run_handler(small_store, **{"from": "2024-01-05", "to": "2024-01-06", "format": "grouped"})
    assert len(out) == 1
    assert out[0]["day"] == "2024-01-05" and len(out[0]["records"]) == small_store.index["2024-01-05"]


def test_grouped_flattens_to_flat(small_store):
    q = {"from": "2024-01-01", "to": "2024-01-04"}
    grouped = run_handler(small_store, **q, format="grouped")
    assert [g["day"] for g in grouped] == ["2024-01-01", "2024-01-02", "2024-01-03"]
    assert [r for g in grouped for r in g["records"]] == run_handler(small_store, **q)


def test_empty_range_yields_nothing(small_store):
    assert run_handler(small_store, **{"from": "2024-01-03", "to": "2024-01-03"}) == []


def test_param_validation_reports_everything():
    with pytest.raises(InvalidParams) as exc:
        normalize_params({"from": "x", "channel": 5, "threshold": "nan", "format": "csv", "workFactor": 0})
    msg = str(exc.value)
    for key in ("from", "to", "channel", "threshold", "format", "workFactor"):
        assert key in msg


def test_parse_rejects_range_outside_store(small_store):
    with pytest.raises(InvalidParams):
        cloud_index_parse(small_store, {"from": "2023-12-30", "to": "2024-01-02"})
    with pytest.raises(EmptyRange):
        cloud_index_parse(small_store, {"from": "2024-01-02", "to": "2024-01-02"})


# -- splitting -----------------------------------------------------------------------


def _days(n, per=2000):
    return [(D0 + timedelta(days=i), per) for i in range(n)]


def test_thirty_days_four_parts():
    ranges = balanced_day_split(_days(30), 4)
    assert [(b - a).days for a, b in ranges] == [7, 7, 8, 8]


def test_one_day_never_empty():
    assert balanced_day_split(_days(1), 4) == [(D0, D0 + timedelta(days=1))]


@settings(max_examples=300, deadline=None)
@given(counts=st.lists(st.integers(0, 5000), min_size=1, max_size=60), parts=st.integers(1, 16))
def test_split_partitions_days(counts, parts):
    dc = [(D0 + timedelta(days=i), c) for i, c in enumerate(counts)]
    ranges = balanced_day_split(dc, parts)
    assert 1 <= len(ranges) <= min(parts, len(counts))
    assert ranges[0][0] == D0 and ranges[-1][1] == D0 + timedelta(days=len(counts))
    for (a, b), (c, _) in zip(ranges, ranges[1:]):
        assert b == c
    assert all(b > a for a, b in ranges)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 120), per=st.integers(1, 3000), parts=st.integers(1, 16))
def test_equal_days_balance_within_one_day(n, per, parts):
    ranges = balanced_day_split(_days(n, per), parts)
    sizes = [(b - a).days for a, b in ranges]
    assert len(sizes) == min(n, parts)
    assert max(sizes) - min(sizes) <= 1


def test_splitter_concurrent_and_iterative(quarter_store):
    q = {"from": "2024-01-01", "to": "2024-01-31"}
    alloc = [{"backendId": f"b{i}"} for i in range(4)]
    subs = cloud_index_splitter(quarter_store, q, alloc, "concurrent")
    assert len(subs) == 4
    counts = [quarter_store.count(date.fromisoformat(s.params["from"]), date.fromisoformat(s.params["to"])) for s in subs]
    assert sum(counts) == 60_000 and max(counts) - min(counts) <= 2000
    assert [c for c in counts] == [14000, 14000, 16000, 16000]
    it = cloud_index_splitter(quarter_store, q, alloc, "iterative")
    assert len(it) == 30
    assert Counter(s.mode for s in it) == {"iterative": 30}
    with pytest.raises(EmptyRange):
        cloud_index_splitter(quarter_store, {"from": "2024-01-05", "to": "2024-01-05"}, alloc, "concurrent")
