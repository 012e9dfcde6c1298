"""Parallel execution of sub-tasks over allocated back-ends.

Two paradigms share one per-request :class:`Dispatch`:

* concurrent -- every sub-task is sent up front, sub-task ``i`` to
  ``allocation[i % m]``;
* iterative -- each back-end holds at most ``per_server_inflight`` sub-tasks
  and asks for the next one (``next``) when it finishes; an empty queue is
  answered with ``done`` and the slot retires.

The dispatch owns the ledger; result chunks go straight to the merger.
Transports deliver incoming envelopes by calling :meth:`Dispatch.on_envelope`.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
from collections import Counter, deque
from dataclasses import dataclass
from typing import Any, AsyncIterator, Iterable, Protocol

from . import wire
from .registry import CONCURRENT, ITERATIVE, MODES, SubTask

log = logging.getLogger(__name__)


class SubtaskFailed(Exception):
    pass


class ProtocolViolation(Exception):
    pass


@dataclass
class ExecutionOptions:
    mode: str = CONCURRENT
    per_server_inflight: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.per_server_inflight < 1:
            raise ValueError("per_server_inflight must be >= 1")

    def required_slots(self, servers: int) -> int:
        return servers * self.per_server_inflight


class DispatchLedger:
    """queued / assigned / terminal bookkeeping for one request."""

    def __init__(self, subtasks: Iterable[SubTask]) -> None:
        self.subtasks = {st.subtask_id: st for st in subtasks}
        self.queued: deque[SubTask] = deque(self.subtasks.values())
        self.assigned: dict[str, str] = {}
        self.terminal: dict[str, str] = {}
        self.inflight: Counter[str] = Counter()
        self.peak_inflight: Counter[str] = Counter()
        self.dispatches: list[tuple[str, str]] = []
        self.violations: list[str] = []

    def pop(self) -> SubTask | None:
        return self.queued.popleft() if self.queued else None

    def assign(self, st: SubTask, backend_id: str) -> None:
        if st.subtask_id in self.assigned or st.subtask_id in self.terminal:
            raise ProtocolViolation(f"{st.subtask_id} assigned twice")
        self.assigned[st.subtask_id] = backend_id
        self.inflight[backend_id] += 1
        self.peak_inflight[backend_id] = max(self.peak_inflight[backend_id], self.inflight[backend_id])
        self.dispatches.append((st.subtask_id, backend_id))

    def finish(self, subtask_id: str, outcome: str) -> bool:
        backend = self.assigned.pop(subtask_id, None)
        if backend is None:
            self.violations.append(f"terminal {outcome} for unassigned {subtask_id}")
            return False
        self.inflight[backend] -= 1
        self.terminal[subtask_id] = outcome
        return True

    def fail_queued(self) -> list[str]:
        ids = [st.subtask_id for st in self.queued]
        for sid in ids:
            self.terminal[sid] = "error"
        self.queued.clear()
        return ids

    def assigned_to(self, backend_id: str) -> list[str]:
        return [sid for sid, b in self.assigned.items() if b == backend_id]

    @property
    def complete(self) -> bool:
        return not self.queued and not self.assigned

    def check_partition(self) -> None:
        q = [st.subtask_id for st in self.queued]
        parts = [set(q), set(self.assigned), set(self.terminal)]
        total = len(q) + len(self.assigned) + len(self.terminal)
        if total != len(self.subtasks) or set().union(*parts) != set(self.subtasks):
            raise AssertionError("ledger sets are not a partition of the sub-tasks")


# -- merging -------------------------------------------------------------------


class MergeState:
    def __init__(self, subtask_ids: Iterable[str]) -> None:
        self.pending = set(subtask_ids)
        self.records_forwarded = 0
        self.failed: str | None = None


class Merger:
    """Fan-in of chunk/end/error envelopes into one record-batch stream.

    Batches from one sub-task keep their order; batches from different
    sub-tasks interleave first-come. Sequence gaps, record-count mismatches
    and duplicate terminals fail the merge.
    """

    _END = object()

    def __init__(self, subtask_ids: Iterable[str]) -> None:
        self.state = MergeState(subtask_ids)
        self._next_seq: dict[str, int] = {sid: 0 for sid in self.state.pending}
        self._received: Counter[str] = Counter()
        self._queue: asyncio.Queue = asyncio.Queue()
        if not self.state.pending:
            self._queue.put_nowait(self._END)

    @property
    def finished(self) -> bool:
        return not self.state.pending or self.state.failed is not None

    def feed(self, env: dict[str, Any]) -> None:
        if self.finished:
            return
        t, p = env["type"], env["payload"]
        sid = p.get("subtaskId", env["id"])
        if sid not in self.state.pending:
            self.fail(f"{t} for sub-task {sid!r} that is not pending")
            return
        if t == "chunk":
            if p.get("seq") != self._next_seq[sid]:
                self.fail(f"sub-task {sid}: chunk seq {p.get('seq')} != expected {self._next_seq[sid]}")
                return
            self._next_seq[sid] += 1
            records = p.get("records") or []
            self._received[sid] += len(records)
            if records:
                self._queue.put_nowait(records)
        elif t == "end":
            if p.get("recordCount") != self._received[sid]:
                self.fail(f"sub-task {sid}: end reports {p.get('recordCount')} records, received {self._received[sid]}")
                return
            self.state.pending.discard(sid)
            if not self.state.pending:
                self._queue.put_nowait(self._END)
        elif t == "error":
            self.fail(f"sub-task {sid} failed: {p.get('message', 'unknown error')}")
        else:
            self.fail(f"unexpected {t} envelope in result stream")

    def fail(self, message: str) -> None:
        if self.finished:
            return
        self.state.failed = message
        self._queue.put_nowait(SubtaskFailed(message))

    async def batches(self) -> AsyncIterator[list[dict[str, Any]]]:
        while True:
            item = await self._queue.get()
            if item is self._END:
                return
            if isinstance(item, SubtaskFailed):
                raise item
            self.state.records_forwarded += len(item)
            yield item

    async def records(self) -> AsyncIterator[dict[str, Any]]:
        async for batch in self.batches():
            for rec in batch:
                yield rec


async def merge_streams(streams: dict[str, AsyncIterator[dict[str, Any]]]) -> AsyncIterator[dict[str, Any]]:
    """Merge per-sub-task envelope streams (chunks then one terminal) into records."""
    merger = Merger(streams)

    async def pump(stream):
        async for env in stream:
            merger.feed(env)

    tasks = [asyncio.create_task(pump(s)) for s in streams.values()]
    try:
        async for rec in merger.records():
            yield rec
    finally:
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)


# -- dispatch ------------------------------------------------------------------


class Transport(Protocol):
    async def send(self, backend: dict[str, Any], envelope: dict[str, Any], dispatch: "Dispatch") -> None: ...

    def release(self, dispatch: "Dispatch") -> None: ...


_request_ids = itertools.count(1)


class Dispatch:
    def __init__(
        self,
        subtasks: list[SubTask],
        allocation: list[dict[str, Any]],
        options: ExecutionOptions,
        transport: Transport,
        request_id: str | None = None,
    ) -> None:
        if not allocation:
            raise ValueError("allocation must name at least one back-end")
        self.request_id = request_id or f"r{next(_request_ids)}"
        self.subtasks = subtasks
        self.allocation = allocation
        self.options = options
        self.transport = transport
        self.ledger = DispatchLedger(subtasks)
        self.merger = Merger(st.subtask_id for st in subtasks)
        self.slots: dict[str, dict[str, Any]] = {}  # live slot -> backend record
        self.retired: set[str] = set()
        self.done_sent: Counter[str] = Counter()
        self.aborted = False

    # -- start --

    async def start(self) -> None:
        if self.options.mode == ITERATIVE:
            await self._start_iterative()
        else:
            await self._start_concurrent()

    async def _start_concurrent(self) -> None:
        m = len(self.allocation)
        i = 0
        while (st := self.ledger.pop()) is not None:
            await self._send_subtask(st, self.allocation[i % m])
            i += 1

    async def _start_iterative(self) -> None:
        servers = list({b["backendId"]: b for b in self.allocation}.values())
        for k in range(self.options.per_server_inflight):
            for s_index, backend in enumerate(servers):
                slot = f"{self.request_id}/{s_index}.{k}"
                self.slots[slot] = backend
                await self._feed_slot(slot)

    async def _feed_slot(self, slot: str) -> None:
        backend = self.slots[slot]
        st = None if self.aborted else self.ledger.pop()
        if st is None:
            del self.slots[slot]
            self.retired.add(slot)
            self.done_sent[backend["backendId"]] += 1
            try:
                await self.transport.send(backend, wire.envelope("done", slot, {"workerSlotId": slot}), self)
            except (OSError, wire.WireError):
                pass
            return
        await self._send_subtask(st, backend, slot)

    async def _send_subtask(self, st: SubTask, backend: dict[str, Any], slot: str | None = None) -> None:
        self.ledger.assign(st, backend["backendId"])
        payload = st.to_payload()
        if slot is not None:
            payload["workerSlotId"] = slot
        try:
            await self.transport.send(backend, wire.envelope("subtask", st.subtask_id, payload), self)
        except (OSError, asyncio.TimeoutError, wire.WireError) as exc:
            self._fail_subtask(st.subtask_id, f"could not reach back-end {backend['backendId']}: {exc}")

    # -- events from the transport --

    async def on_envelope(self, backend_id: str, env: dict[str, Any]) -> None:
        t, p = env["type"], env["payload"]
        if t == "chunk":
            self.merger.feed(env)
        elif t in ("end", "error"):
            sid = p.get("subtaskId", env["id"])
            if self.ledger.finish(sid, t):
                self.merger.feed(env)
                if t == "error":
                    self._abort()
            else:
                log.warning("request %s: %s", self.request_id, self.ledger.violations[-1])
        elif t == "next":
            slot = p.get("workerSlotId", env["id"])
            if slot in self.retired:
                self.ledger.violations.append(f"next on retired slot {slot}")
                log.warning("request %s: pull after done on slot %s ignored", self.request_id, slot)
                return
            if slot not in self.slots:
                self.ledger.violations.append(f"next on unknown slot {slot}")
                return
            await self._feed_slot(slot)
        else:
            log.debug("request %s: ignoring %s from %s", self.request_id, t, backend_id)

    def on_backend_lost(self, backend_id: str) -> None:
        for sid in self.ledger.assigned_to(backend_id):
            self._fail_subtask(sid, f"connection to back-end {backend_id} lost")
        for slot, b in list(self.slots.items()):
            if b["backendId"] == backend_id:
                del self.slots[slot]
                self.retired.add(slot)

    def _fail_subtask(self, sid: str, message: str) -> None:
        if self.ledger.finish(sid, "error"):
            self.merger.feed(wire.envelope("error", sid, {"subtaskId": sid, "message": message}))
        self._abort()

    def _abort(self) -> None:
        # no retries: queued work is failed so the ledger still terminates
        self.aborted = True
        self.ledger.fail_queued()

    # -- results --

    async def batches(self) -> AsyncIterator[list[dict[str, Any]]]:
        try:
            async for batch in self.merger.batches():
                yield batch
        finally:
            self.close()

    async def records(self) -> AsyncIterator[dict[str, Any]]:
        async for batch in self.batches():
            for rec in batch:
                yield rec

    def close(self) -> None:
        self.transport.release(self)


class ParallelCommander:
    """Entry point used by the front-end; one instance per transport."""

    def __init__(self, transport: Transport) -> None:
        self.transport = transport

    async def execute_concurrent(
        self, subtasks: list[SubTask], allocation: list[dict[str, Any]], options: ExecutionOptions | None = None
    ) -> Dispatch:
        options = options or ExecutionOptions(CONCURRENT)
        d = Dispatch(subtasks, allocation, ExecutionOptions(CONCURRENT, options.per_server_inflight), self.transport)
        await d.start()
        return d

    async def execute_iterative(
        self, subtasks: list[SubTask], allocation: list[dict[str, Any]], options: ExecutionOptions
    ) -> Dispatch:
        d = Dispatch(subtasks, allocation, ExecutionOptions(ITERATIVE, options.per_server_inflight), self.transport)
        await d.start()
        return d

    async def execute(
        self, subtasks: list[SubTask], allocation: list[dict[str, Any]], options: ExecutionOptions
    ) -> Dispatch:
        if options.mode == ITERATIVE:
            return await self.execute_iterative(subtasks, allocation, options)
        return await self.execute_concurrent(subtasks, allocation, options)
