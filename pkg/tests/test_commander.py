import asyncio
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakes import FakeCluster
from scatterd import wire
from scatterd.commander import (
    Dispatch,
    DispatchLedger,
    ExecutionOptions,
    Merger,
    ParallelCommander,
    SubtaskFailed,
    merge_streams,
)
from scatterd.registry import SubTask
from scatterd.scheduler import Scheduler


def subtasks(n):
    return [SubTask("uc", {"i": i}, f"t{i}") for i in range(n)]


async def collect(dispatch):
    return [r async for r in dispatch.records()]


def run_concurrent(n_sub, backends, **kw):
    async def main():
        fake = FakeCluster(backends, **kw)
        d = await ParallelCommander(fake).execute_concurrent(subtasks(n_sub), fake.backends)
        recs = await collect(d)
        return fake, d, recs

    return asyncio.run(main())


def run_iterative(n_sub, backends, inflight, **kw):
    async def main():
        fake = FakeCluster(backends, **kw)
        d = await ParallelCommander(fake).execute_iterative(
            subtasks(n_sub), fake.backends, ExecutionOptions("iterative", inflight)
        )
        recs = await collect(d)
        return fake, d, recs

    return asyncio.run(main())


# -- concurrent ------------------------------------------------------------------


def test_ten_over_five_with_scheduler_allocation():
    sched = Scheduler()
    for i in range(5):
        sched.register_backend("h", i)
    alloc = [b.to_json() for b in sched.allocate(10)]

    async def main():
        fake = FakeCluster([])
        d = await ParallelCommander(fake).execute_concurrent(subtasks(10), alloc)
        await collect(d)
        return fake, d

    fake, d = asyncio.run(main())
    assert Counter(b for _, b in d.ledger.dispatches) == {f"h:{i}": 2 for i in range(5)}
    kinds = [k for k, _, _ in fake.events]
    assert kinds.index("complete") >= 10  # every dispatch precedes the first completion


def test_ten_over_five_modulo_assignment():
    fake, d, recs = run_concurrent(10, [f"b{i}" for i in range(5)])
    assert Counter(fake.received.values()) == {2: 5}
    assert len(recs) == 30
    assert fake.released == 1


def test_single_subtask_four_servers():
    fake, d, recs = run_concurrent(1, ["a", "b", "c", "d"])
    assert sum(fake.received.values()) == 1
    assert sum(1 for b in "abcd" if fake.received[b] == 0) == 3


def test_backend_killed_mid_run_aborts():
    async def main():
        fake = FakeCluster(["a", "b", "c", "d"], dead={"c"}, latency=(0.001, 0.003))
        d = await ParallelCommander(fake).execute_concurrent(subtasks(8), fake.backends)
        asyncio.get_running_loop().call_later(0.05, d.on_backend_lost, "c")
        with pytest.raises(SubtaskFailed, match="c"):
            await collect(d)
        await asyncio.gather(*fake.tasks)
        return d

    d = asyncio.run(main())
    c_tasks = [sid for sid, b in d.ledger.dispatches if b == "c"]
    assert len(c_tasks) == 2
    assert all(d.ledger.terminal[sid] == "error" for sid in c_tasks)
    d.ledger.check_partition()


def test_error_envelope_aborts_and_no_duplicates():
    async def main():
        fake = FakeCluster(["a"], dead={"a"})
        d = await ParallelCommander(fake).execute_concurrent(subtasks(2), fake.backends)
        await d.on_envelope("a", wire.envelope("error", "t0", {"subtaskId": "t0", "message": "boom"}))
        # a late terminal for an already-failed sub-task is a logged violation
        await d.on_envelope("a", wire.envelope("end", "t0", {"subtaskId": "t0", "recordCount": 0}))
        with pytest.raises(SubtaskFailed, match="boom"):
            await collect(d)
        return d

    d = asyncio.run(main())
    assert d.ledger.violations


# -- iterative ---------------------------------------------------------------------


def test_three_subtasks_four_servers_inflight_one():
    fake, d, recs = run_iterative(3, ["a", "b", "c", "d"], 1)
    assert sum(fake.received.values()) == 3
    # the fourth slot gets done immediately, the others after their one sub-task
    assert sum(fake.done.values()) == 4
    first_done = [e for e in fake.events if e[0] == "done"][0]
    assert fake.events.index(first_done) == 3
    assert len(recs) == 9


def test_pull_after_done_is_ignored():
    async def main():
        fake = FakeCluster(["a"])
        d = await ParallelCommander(fake).execute_iterative(subtasks(1), fake.backends, ExecutionOptions("iterative", 2))
        await collect(d)
        await asyncio.gather(*fake.tasks)
        before = len(fake.events)
        retired = next(iter(d.retired))
        await d.on_envelope("a", wire.envelope("next", retired, {"workerSlotId": retired}))
        return fake, d, before

    fake, d, before = asyncio.run(main())
    assert len(fake.events) == before
    assert any("retired" in v for v in d.ledger.violations)


def test_four_hundred_over_four_bounded():
    fake, d, recs = run_iterative(400, ["a", "b", "c", "d"], 10, latency=(0, 0.003), seed=3)
    assert len(d.ledger.terminal) == 400 and set(d.ledger.terminal.values()) == {"end"}
    assert len(d.ledger.dispatches) == len({sid for sid, _ in d.ledger.dispatches}) == 400
    assert max(d.ledger.peak_inflight.values()) <= 10
    assert max(fake.peak_holding.values()) <= 10
    assert len(recs) == 1200


@settings(max_examples=100, deadline=None)
@given(
    n_sub=st.integers(0, 60),
    n_backends=st.integers(1, 6),
    inflight=st.integers(1, 5),
    seed=st.integers(0, 2**31),
    mode=st.sampled_from(["concurrent", "iterative"]),
)
def test_randomized_partition_invariant(n_sub, n_backends, inflight, seed, mode):
    backends = [f"b{i}" for i in range(n_backends)]
    if mode == "iterative":
        fake, d, recs = run_iterative(n_sub, backends, inflight, seed=seed, latency=(0, 0.001))
        assert max(d.ledger.peak_inflight.values(), default=0) <= inflight
    else:
        fake, d, recs = run_concurrent(n_sub, backends, seed=seed, latency=(0, 0.001))
    d.ledger.check_partition()
    assert d.ledger.complete
    ids = [sid for sid, _ in d.ledger.dispatches]
    assert sorted(ids) == sorted(f"t{i}" for i in range(n_sub))
    assert Counter(r["sid"] for r in recs) == {f"t{i}": 3 for i in range(n_sub)}


# -- ledger and merger -----------------------------------------------------------


def test_ledger_rejects_double_assignment():
    led = DispatchLedger(subtasks(1))
    st_ = led.pop()
    led.assign(st_, "a")
    with pytest.raises(Exception):
        led.assign(st_, "b")


def _chunk(sid, seq, recs):
    return wire.envelope("chunk", sid, {"subtaskId": sid, "seq": seq, "records": recs})


def _end(sid, n):
    return wire.envelope("end", sid, {"subtaskId": sid, "recordCount": n})


async def _drain(m):
    return [r async for r in m.records()]


def test_merger_conservation():
    m = Merger(["a", "b", "c", "d"])
    sizes = {"a": 3, "b": 0, "c": 5, "d": 1}
    for sid, n in sizes.items():
        if n:
            m.feed(_chunk(sid, 0, [{"x": i} for i in range(n)]))
        m.feed(_end(sid, n))
    assert len(asyncio.run(_drain(m))) == sum(sizes.values())


def test_merger_single_identity_order():
    recs = [{"i": i} for i in range(20)]
    m = Merger(["s"])
    for k in range(4):
        m.feed(_chunk("s", k, recs[5 * k : 5 * k + 5]))
    m.feed(_end("s", 20))
    assert asyncio.run(_drain(m)) == recs


def test_merger_seq_gap_fails():
    m = Merger(["s"])
    m.feed(_chunk("s", 0, [{}]))
    m.feed(_chunk("s", 2, [{}]))
    with pytest.raises(SubtaskFailed, match="seq"):
        asyncio.run(_drain(m))


def test_merger_count_mismatch_fails():
    m = Merger(["s"])
    m.feed(_chunk("s", 0, [{}, {}]))
    m.feed(_end("s", 3))
    with pytest.raises(SubtaskFailed, match="3"):
        asyncio.run(_drain(m))


def test_merger_empty_is_finished():
    assert asyncio.run(_drain(Merger([]))) == []


def test_merge_streams_interleaves_and_preserves_per_stream_order():
    async def stream(sid, n, delay):
        for k in range(n):
            await asyncio.sleep(delay * random.random())
            yield _chunk(sid, k, [{"sid": sid, "k": k}])
        yield _end(sid, n)

    async def main():
        streams = {f"s{i}": stream(f"s{i}", 10, 0.002) for i in range(4)}
        return [r async for r in merge_streams(streams)]

    out = asyncio.run(main())
    assert len(out) == 40
    for i in range(4):
        assert [r["k"] for r in out if r["sid"] == f"s{i}"] == list(range(10))


def test_dispatch_requires_allocation():
    with pytest.raises(ValueError):
        Dispatch(subtasks(1), [], ExecutionOptions(), FakeCluster([]))
