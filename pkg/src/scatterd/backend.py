"""Worker process: executes use-case handlers and streams result chunks."""

from __future__ import annotations

import asyncio
import concurrent.futures
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from . import wire
from .registry import ITERATIVE, Registry, SubTask, UnknownUseCase
from .scheduler import SchedulerClient

log = logging.getLogger(__name__)

CHUNK_RECORDS = 500
CHUNK_BYTES = 1024 * 1024

_encode = json.JSONEncoder(ensure_ascii=False, separators=(",", ":"), allow_nan=False).encode


def default_concurrency() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class BackendStats:
    running: int = 0
    queued: int = 0
    completed: int = 0
    failed: int = 0
    records_emitted: int = 0
    peak_running: int = 0

    def to_json(self) -> dict[str, int]:
        return {
            "running": self.running,
            "queued": self.queued,
            "completed": self.completed,
            "failed": self.failed,
            "recordsEmitted": self.records_emitted,
            "peakRunning": self.peak_running,
        }


@dataclass
class SubTaskExecution:
    subtask: SubTask
    slot: str | None = None
    state: str = "queued"
    records_emitted: int = 0
    chunks: int = field(default=0)


class ChunkSink:
    """Record sink handed to handlers; called from a worker thread.

    Records are serialized once here and framed as chunk envelopes of at
    most CHUNK_RECORDS records. Each flush blocks the handler thread until
    the frame is written, which gives natural backpressure.
    """

    def __init__(self, conn: wire.ObjectConnection, loop: asyncio.AbstractEventLoop, execution: SubTaskExecution):
        self.conn = conn
        self.loop = loop
        self.execution = execution
        self._sid = _encode(execution.subtask.subtask_id)
        self._buf: list[str] = []
        self._bytes = 0

    def __call__(self, record: dict[str, Any]) -> None:
        if self.conn.closed:
            raise wire.ConnectionLost("front-end connection closed")
        if not isinstance(record, dict):
            raise TypeError("handler records must be JSON objects")
        s = _encode(record)
        self._buf.append(s)
        self._bytes += len(s)
        if len(self._buf) >= CHUNK_RECORDS or self._bytes >= CHUNK_BYTES:
            self.flush()

    def flush(self) -> None:
        if not self._buf:
            return
        ex = self.execution
        frame = wire.frame_body(wire.chunk_body(self._sid, ex.chunks, self._buf))
        fut = asyncio.run_coroutine_threadsafe(self.conn.send_raw(frame), self.loop)
        while True:
            try:
                fut.result(timeout=1.0)
                break
            except concurrent.futures.TimeoutError:
                if self.loop.is_closed() or not self.loop.is_running():
                    fut.cancel()
                    raise wire.ConnectionLost("event loop stopped") from None
        ex.chunks += 1
        ex.records_emitted += len(self._buf)
        self._buf.clear()
        self._bytes = 0


class BackendServer:
    def __init__(
        self,
        host: str,
        port: int,
        registry: Registry,
        scheduler: tuple[str, int] | None = None,
        concurrency: int | None = None,
        stats_port: int | None = None,
        advertise_host: str | None = None,
    ) -> None:
        self.host = host
        self.port = port
        self.registry = registry
        self.scheduler_endpoint = scheduler
        self.concurrency = concurrency or default_concurrency()
        self.stats_port = stats_port
        self.advertise_host = advertise_host or host
        self.stats = BackendStats()
        self.registered = asyncio.Event()
        self.stopped = asyncio.Event()
        self._slots = asyncio.Semaphore(self.concurrency)
        self._pool = ThreadPoolExecutor(max_workers=self.concurrency, thread_name_prefix="handler")
        self._server: asyncio.base_events.Server | None = None
        self._tasks: set[asyncio.Task] = set()
        self._http_runner = None
        self._sched_client: SchedulerClient | None = None

    # -- lifecycle --------------------------------------------------------

    async def start(self) -> None:
        self._server = await wire.serve_objects(self._handle, self.host, self.port)
        log.info("back-end listening on %s:%s (concurrency %d)", self.host, self.port, self.concurrency)
        if self.stats_port:
            await self._start_stats_http()
        if self.scheduler_endpoint:
            self._spawn(self._registration_loop())

    async def serve_forever(self) -> None:
        await self.start()
        await self.stopped.wait()
        await self.close()

    async def close(self) -> None:
        self.stopped.set()
        if self._server is not None:
            self._server.close()
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._sched_client is not None:
            await self._sched_client.close()
        if self._http_runner is not None:
            await self._http_runner.cleanup()
        self._pool.shutdown(wait=False, cancel_futures=True)

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _registration_loop(self) -> None:
        """Keep a live registration; re-register whenever the scheduler link drops."""
        host, port = self.scheduler_endpoint
        delay = 0.2
        while not self.stopped.is_set():
            client = SchedulerClient(host, port)
            self._sched_client = client
            try:
                bid = await client.register(self.advertise_host, self.port)
                log.info("registered with scheduler as %s", bid)
                self.registered.set()
                delay = 0.2
                await client.wait_closed()
                log.warning("scheduler link lost; re-registering")
            except (OSError, asyncio.TimeoutError, wire.WireError, RuntimeError) as exc:
                log.debug("scheduler registration failed: %s", exc)
            finally:
                self.registered.clear()
                await client.close()
            await asyncio.sleep(delay)
            delay = min(delay * 2, 2.0)

    async def _start_stats_http(self) -> None:
        from aiohttp import web

        async def stats(_request):
            return web.json_response(self.stats.to_json())

        app = web.Application()
        app.router.add_get("/stats", stats)
        self._http_runner = web.AppRunner(app, access_log=None)
        await self._http_runner.setup()
        await web.TCPSite(self._http_runner, self.host, self.stats_port, reuse_address=True).start()

    # -- protocol ---------------------------------------------------------

    async def _handle(self, conn: wire.ObjectConnection) -> None:
        # sub-tasks of a lost connection are not cancelled here: the handler
        # thread cannot be interrupted, so the sink raises ConnectionLost at
        # its next record and the execution is accounted as failed
        try:
            async for obj in conn:
                env = wire.check_envelope(obj)
                t, p = env["type"], env["payload"]
                if t == "subtask":
                    self._spawn(self._run(conn, p))
                elif t == "ping":
                    await conn.send(
                        wire.envelope(
                            "pong",
                            env["id"],
                            {"role": "backend", "registered": self.registered.is_set(), "stats": self.stats.to_json()},
                        )
                    )
                elif t == "done":
                    log.debug("slot %s retired", p.get("workerSlotId"))
                elif t == "stop":
                    self.stopped.set()
                    return
                else:
                    await conn.send(wire.envelope("error", env["id"], {"message": f"unexpected message {t!r}"}))
        finally:
            conn.closed = True

    async def _run(self, conn: wire.ObjectConnection, payload: dict[str, Any]) -> None:
        try:
            st = SubTask.from_payload(payload)
        except (KeyError, TypeError) as exc:
            sid = str(payload.get("subtaskId") or "?")
            await conn.send(wire.envelope("error", sid, {"subtaskId": sid, "message": f"bad subtask: {exc!r}"}))
            return
        ex = SubTaskExecution(st, slot=payload.get("workerSlotId"))
        self.stats.queued += 1
        try:
            async with self._slots:
                self.stats.queued -= 1
                ex.state = "running"
                self.stats.running += 1
                self.stats.peak_running = max(self.stats.peak_running, self.stats.running)
                try:
                    terminal = await self._execute(conn, ex)
                finally:
                    self.stats.running -= 1
        except asyncio.CancelledError:
            if ex.state == "queued":
                self.stats.queued -= 1
            raise
        if terminal is None:
            return
        try:
            await conn.send(terminal)
            if st.mode == ITERATIVE and ex.slot:
                await conn.send(wire.envelope("next", ex.slot, {"workerSlotId": ex.slot}))
        except wire.ConnectionLost:
            log.debug("front-end went away after %s finished", st.subtask_id)

    async def _execute(self, conn: wire.ObjectConnection, ex: SubTaskExecution) -> dict[str, Any] | None:
        st = ex.subtask
        loop = asyncio.get_running_loop()
        try:
            uc = self.registry.lookup_by_name(st.usecase)
        except UnknownUseCase:
            ex.state = "failed"
            self.stats.failed += 1
            return wire.envelope(
                "error", st.subtask_id, {"subtaskId": st.subtask_id, "message": f"unknown use case {st.usecase!r}"}
            )
        if conn.closed:
            ex.state = "failed"
            self.stats.failed += 1
            return None
        sink = ChunkSink(conn, loop, ex)

        def work():
            uc.handler(st.params, sink)
            sink.flush()

        try:
            await loop.run_in_executor(self._pool, work)
        except wire.ConnectionLost:
            ex.state = "failed"
            self.stats.failed += 1
            log.info("connection lost during %s; aborted", st.subtask_id)
            return None
        except Exception as exc:  # handler bugs surface to the caller as an error envelope
            ex.state = "failed"
            self.stats.failed += 1
            self.stats.records_emitted += ex.records_emitted
            log.warning("subtask %s failed: %r", st.subtask_id, exc)
            return wire.envelope(
                "error", st.subtask_id, {"subtaskId": st.subtask_id, "message": f"{type(exc).__name__}: {exc}"}
            )
        ex.state = "completed"
        self.stats.completed += 1
        self.stats.records_emitted += ex.records_emitted
        return wire.envelope(
            "end",
            st.subtask_id,
            {"subtaskId": st.subtask_id, "recordCount": ex.records_emitted, "chunks": ex.chunks},
        )
