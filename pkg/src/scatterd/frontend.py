"""HTTP gateway: plan, scatter to back-ends, gather, stream NDJSON out."""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import uuid
import zlib
from dataclasses import dataclass, field
from typing import Any, AsyncIterator

from aiohttp import web

from . import wire
from .commander import Dispatch, ExecutionOptions, ParallelCommander, SubtaskFailed
from .registry import CONCURRENT, MODES, InvalidParams, Registry, SubTask, UnknownUseCase, UseCase
from .scheduler import NoBackendsAvailable, SchedulerClient

log = logging.getLogger(__name__)

DEFAULT_SPLIT_THRESHOLD = 1000
NDJSON = "application/x-ndjson"

_encode = json.JSONEncoder(ensure_ascii=False, separators=(",", ":"), allow_nan=False).encode


# -- planning ------------------------------------------------------------------


@dataclass
class RequestPlan:
    usecase: UseCase
    query: dict[str, Any]
    estimated_docs: int
    split: bool
    subtasks: list[SubTask]
    mode: str
    allocation: list[dict[str, Any]] = field(default_factory=list)


def should_split(estimated_docs: int, available_backends: int, threshold: int) -> bool:
    return estimated_docs >= threshold and available_backends >= 2


def plan_split(
    usecase: UseCase,
    query: dict[str, Any],
    allocation: list[dict[str, Any]],
    mode: str = CONCURRENT,
    split_threshold: int = DEFAULT_SPLIT_THRESHOLD,
    available: int | None = None,
    request_id: str | None = None,
) -> RequestPlan:
    """Decide whether to split and produce the sub-task list.

    Unsplit requests become one sub-task on the first allocated back-end.
    """
    if mode not in MODES:
        raise InvalidParams(f"mode: must be concurrent or iterative, got {mode!r}")
    estimated = usecase.estimate(query) if usecase.estimate else split_threshold
    if available is None:
        available = len({b["backendId"] for b in allocation})
    split = should_split(estimated, available, split_threshold)
    if split:
        subtasks = usecase.splitter(query, allocation, mode)
    else:
        mode = CONCURRENT
        allocation = allocation[:1]
        subtasks = usecase.splitter(query, allocation, CONCURRENT)
    if not subtasks:
        raise InvalidParams("splitter produced no sub-tasks")
    rid = request_id or uuid.uuid4().hex[:12]
    for i, st in enumerate(subtasks):
        st.subtask_id = f"{rid}-{i}"
        st.mode = mode
    return RequestPlan(usecase, query, estimated, split, subtasks, mode, allocation)


# -- egress --------------------------------------------------------------------


async def encode_lines(batches: AsyncIterator[Any]) -> AsyncIterator[bytes]:
    async for batch in batches:
        if isinstance(batch, wire.RawRecords):
            if batch.count:
                yield batch.ndjson
        elif batch:
            yield ("\n".join(map(_encode, batch)) + "\n").encode("utf-8")


async def compress_egress(chunks: AsyncIterator[bytes], level: int = 6) -> AsyncIterator[bytes]:
    """Gzip a byte stream on the fly; an empty input still yields a valid member."""
    z = zlib.compressobj(level, zlib.DEFLATED, 16 + zlib.MAX_WBITS)
    async for chunk in chunks:
        out = z.compress(chunk)
        if out:
            yield out
    yield z.flush()


def accepts_gzip(header: str | None) -> bool:
    if not header:
        return False
    for part in header.split(","):
        token, _, params = part.strip().partition(";")
        if token.strip().lower() in ("gzip", "x-gzip", "*"):
            q = params.strip()
            if q.startswith("q="):
                try:
                    return float(q[2:]) > 0
                except ValueError:
                    return False
            return True
    return False


# -- back-end connections --------------------------------------------------------


class _BackendLink:
    def __init__(self, backend_id: str, conn: wire.ObjectConnection) -> None:
        self.backend_id = backend_id
        self.conn = conn
        self.dispatches: set[Dispatch] = set()
        self.reader: asyncio.Task | None = None


class BackendPool:
    """Persistent, multiplexed connections to back-ends (the commander transport).

    Envelopes coming back are routed by subtaskId (chunk/end/error) or by
    workerSlotId (next). A lost connection fails every sub-task routed over
    it; the next send reconnects.
    """

    def __init__(self, connect_timeout: float = 3.0) -> None:
        self.connect_timeout = connect_timeout
        self._links: dict[str, _BackendLink] = {}
        self._connecting: dict[str, asyncio.Lock] = {}
        self._routes: dict[str, Dispatch] = {}
        self._slots: dict[str, Dispatch] = {}
        self._owned: dict[Dispatch, list[str]] = {}

    async def _link(self, backend: dict[str, Any]) -> _BackendLink:
        bid = backend["backendId"]
        link = self._links.get(bid)
        if link is not None and not link.conn.closed:
            return link
        lock = self._connecting.setdefault(bid, asyncio.Lock())
        async with lock:
            link = self._links.get(bid)
            if link is not None and not link.conn.closed:
                return link
            conn = await wire.open_object_connection(
                backend["host"], int(backend["port"]), self.connect_timeout, lift_chunks=True
            )
            link = _BackendLink(bid, conn)
            link.reader = asyncio.create_task(self._read(link))
            self._links[bid] = link
            return link

    async def send(self, backend: dict[str, Any], envelope: dict[str, Any], dispatch: Dispatch) -> None:
        link = await self._link(backend)
        keys = self._owned.setdefault(dispatch, [])
        p = envelope["payload"]
        if envelope["type"] == "subtask":
            self._routes[p["subtaskId"]] = dispatch
            keys.append(p["subtaskId"])
        slot = p.get("workerSlotId")
        if slot and envelope["type"] == "subtask":
            self._slots[slot] = dispatch
            keys.append(slot)
        link.dispatches.add(dispatch)
        await link.conn.send(envelope)

    def release(self, dispatch: Dispatch) -> None:
        for key in self._owned.pop(dispatch, ()):
            self._routes.pop(key, None)
            self._slots.pop(key, None)
        for link in self._links.values():
            link.dispatches.discard(dispatch)

    async def _read(self, link: _BackendLink) -> None:
        try:
            async for obj in link.conn:
                env = wire.check_envelope(obj)
                t, p = env["type"], env["payload"]
                if t == "next":
                    slot = p.get("workerSlotId", env["id"])
                    d = self._slots.get(slot)
                    if d is None:
                        # request already gone; tell the slot to retire
                        await link.conn.send(wire.envelope("done", slot, {"workerSlotId": slot}))
                        continue
                    await d.on_envelope(link.backend_id, env)
                elif t in ("chunk", "end", "error"):
                    d = self._routes.get(p.get("subtaskId", env["id"]))
                    if d is not None:
                        await d.on_envelope(link.backend_id, env)
                else:
                    log.debug("ignoring %s from %s", t, link.backend_id)
        except (wire.WireError, OSError) as exc:
            log.warning("link to back-end %s failed: %s", link.backend_id, exc)
        finally:
            link.conn.closed = True
            await link.conn.close()
            if self._links.get(link.backend_id) is link:
                del self._links[link.backend_id]
            for d in list(link.dispatches):
                d.on_backend_lost(link.backend_id)

    async def close(self) -> None:
        links = list(self._links.values())
        for link in links:
            await link.conn.close()
        await asyncio.gather(*(l.reader for l in links if l.reader), return_exceptions=True)


# -- HTTP server -------------------------------------------------------------------


@dataclass
class FrontendStats:
    requests: int = 0
    active: int = 0
    completed: int = 0
    failed: int = 0
    records_forwarded: int = 0
    bytes_sent: int = 0
    subtasks_dispatched: int = 0

    def to_json(self) -> dict[str, int]:
        return {
            "requests": self.requests,
            "active": self.active,
            "completed": self.completed,
            "failed": self.failed,
            "recordsForwarded": self.records_forwarded,
            "bytesSent": self.bytes_sent,
            "subtasksDispatched": self.subtasks_dispatched,
        }


class FrontendServer:
    def __init__(
        self,
        registry: Registry,
        scheduler: tuple[str, int],
        http_host: str = "127.0.0.1",
        http_port: int = 8080,
        control_port: int | None = None,
        split_threshold: int = DEFAULT_SPLIT_THRESHOLD,
        default_inflight: int = 10,
        drain_timeout: float = 10.0,
    ) -> None:
        self.registry = registry
        self.scheduler = SchedulerClient(*scheduler)
        self.http_host = http_host
        self.http_port = http_port
        self.control_port = control_port
        self.split_threshold = split_threshold
        self.default_inflight = default_inflight
        self.drain_timeout = drain_timeout
        self.pool = BackendPool()
        self.commander = ParallelCommander(self.pool)
        self.stats = FrontendStats()
        self.stopped = asyncio.Event()
        self._idle = asyncio.Event()
        self._idle.set()
        self._runner: web.AppRunner | None = None
        self._control: asyncio.base_events.Server | None = None
        self._rid = itertools.count(1)
        self._prefix = uuid.uuid4().hex[:6]

    def app(self) -> web.Application:
        app = web.Application()
        app.router.add_get("/healthz", self._healthz)
        app.router.add_get("/stats", self._stats)
        app.router.add_get("/api/{path:.+}", self._api)
        return app

    async def start(self) -> None:
        self._runner = web.AppRunner(self.app(), access_log=None, handler_cancellation=True)
        await self._runner.setup()
        await web.TCPSite(self._runner, self.http_host, self.http_port, reuse_address=True).start()
        if self.control_port:
            self._control = await wire.serve_objects(self._handle_control, self.http_host, self.control_port)
        log.info("front-end serving http://%s:%s", self.http_host, self.http_port)

    async def serve_forever(self) -> None:
        await self.start()
        await self.stopped.wait()
        await self.close()

    async def close(self) -> None:
        self.stopped.set()
        if self._control is not None:
            self._control.close()
        if self._runner is not None:
            # stop accepting, then give in-flight responses a chance to finish
            for site in list(self._runner.sites):
                await site.stop()
            try:
                await asyncio.wait_for(self._idle.wait(), self.drain_timeout)
            except asyncio.TimeoutError:
                log.warning("drain timed out with %d active requests", self.stats.active)
            await self._runner.cleanup()
        await self.pool.close()
        await self.scheduler.close()

    async def _handle_control(self, conn: wire.ObjectConnection) -> None:
        async for obj in conn:
            env = wire.check_envelope(obj)
            if env["type"] == "ping":
                await conn.send(wire.envelope("pong", env["id"], {"role": "frontend", **self.stats.to_json()}))
            elif env["type"] == "stop":
                self.stopped.set()
                return

    async def _healthz(self, _request: web.Request) -> web.Response:
        return web.Response(text="ok")

    async def _stats(self, _request: web.Request) -> web.Response:
        return web.json_response(self.stats.to_json())

    # -- request path --

    async def plan(self, path: str, raw_query: dict[str, str]) -> RequestPlan:
        uc = self.registry.lookup_by_url(path)
        query = uc.parse_query(raw_query) if uc.parse_query else dict(raw_query)
        mode = raw_query.get("mode", CONCURRENT)
        if mode not in MODES:
            raise InvalidParams(f"mode: must be concurrent or iterative, got {mode!r}")
        estimated = uc.estimate(query) if uc.estimate else self.split_threshold
        if estimated >= self.split_threshold:
            servers, total = await self.scheduler.allocate(None)
        else:
            servers, total = await self.scheduler.allocate(1)
        rid = f"{self._prefix}.{next(self._rid)}"
        return plan_split(uc, query, servers, mode, self.split_threshold, available=total, request_id=rid)

    async def execute(self, plan: RequestPlan) -> Dispatch:
        options = ExecutionOptions(plan.mode, self.default_inflight)
        self.stats.subtasks_dispatched += len(plan.subtasks)
        return await self.commander.execute(plan.subtasks, plan.allocation, options)

    async def _api(self, request: web.Request) -> web.StreamResponse:
        self.stats.requests += 1
        self.stats.active += 1
        self._idle.clear()
        try:
            return await self._serve(request)
        finally:
            self.stats.active -= 1
            if self.stats.active == 0:
                self._idle.set()

    async def _serve(self, request: web.Request) -> web.StreamResponse:
        path = "/" + request.match_info["path"]
        try:
            plan = await self.plan(path, dict(request.query))
        except UnknownUseCase:
            return _json_error(404, f"no use case at {path}")
        except InvalidParams as exc:
            return _json_error(400, str(exc))
        except (NoBackendsAvailable, OSError, asyncio.TimeoutError, wire.WireError) as exc:
            self.stats.failed += 1
            return _json_error(503, f"no back-ends available: {exc}")

        dispatch = await self.execute(plan)
        try:
            return await self._respond(request, plan, dispatch)
        finally:
            dispatch.close()

    async def _respond(self, request: web.Request, plan: RequestPlan, dispatch: Dispatch) -> web.StreamResponse:
        batches = dispatch.batches()
        # hold the status line back until the first batch: early failures become 502
        try:
            first = await batches.__anext__()
        except StopAsyncIteration:
            first = None
        except SubtaskFailed as exc:
            self.stats.failed += 1
            return _json_error(502, str(exc))

        async def all_batches():
            if first is not None:
                self.stats.records_forwarded += len(first)
                yield first
            async for b in batches:
                self.stats.records_forwarded += len(b)
                yield b

        gz = accepts_gzip(request.headers.get("Accept-Encoding"))
        resp = web.StreamResponse(status=200)
        resp.content_type = NDJSON
        resp.headers["X-Subtasks"] = str(len(plan.subtasks))
        resp.headers["X-Split"] = "1" if plan.split else "0"
        if gz:
            resp.headers["Content-Encoding"] = "gzip"
        await resp.prepare(request)

        body = encode_lines(all_batches())
        sink = _ErrorTail()
        stream = compress_egress(sink.guard(body)) if gz else sink.guard(body)
        async for data in stream:
            self.stats.bytes_sent += len(data)
            await resp.write(data)
        if sink.error is not None:
            self.stats.failed += 1
            # signal truncation: no chunked terminator, connection dropped
            if request.transport is not None:
                request.transport.close()
            return resp
        await resp.write_eof()
        self.stats.completed += 1
        return resp


class _ErrorTail:
    """Turn a mid-stream sub-task failure into a final {"error": ...} line."""

    def __init__(self) -> None:
        self.error: str | None = None

    async def guard(self, chunks: AsyncIterator[bytes]) -> AsyncIterator[bytes]:
        try:
            async for c in chunks:
                yield c
        except SubtaskFailed as exc:
            self.error = str(exc)
            yield (_encode({"error": self.error}) + "\n").encode("utf-8")


def _json_error(status: int, message: str) -> web.Response:
    return web.json_response({"error": message}, status=status)

