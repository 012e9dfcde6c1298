"""Round-robin mapping of sub-tasks onto registered back-ends."""

from __future__ import annotations

import asyncio
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any

from . import wire

log = logging.getLogger(__name__)


class NoBackendsAvailable(Exception):
    pass


class UnknownBackend(KeyError):
    pass


@dataclass
class BackendRecord:
    backend_id: str
    host: str
    port: int
    last_seen: float = field(default_factory=time.monotonic)

    def to_json(self) -> dict[str, Any]:
        return {"backendId": self.backend_id, "host": self.host, "port": self.port}


class Scheduler:
    """Registration-ordered back-end list with one global round-robin cursor."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._backends: list[BackendRecord] = []
        self._cursor = 0

    @property
    def backends(self) -> list[BackendRecord]:
        with self._lock:
            return list(self._backends)

    @property
    def cursor(self) -> int:
        return self._cursor

    def register_backend(self, host: str, port: int) -> str:
        with self._lock:
            for rec in self._backends:
                if rec.host == host and rec.port == port:
                    rec.last_seen = time.monotonic()
                    return rec.backend_id
            rec = BackendRecord(f"{host}:{port}", host, int(port))
            self._backends.append(rec)
            return rec.backend_id

    def deregister_backend(self, backend_id: str) -> None:
        with self._lock:
            for i, rec in enumerate(self._backends):
                if rec.backend_id == backend_id:
                    break
            else:
                raise UnknownBackend(backend_id)
            del self._backends[i]
            if i < self._cursor:
                self._cursor -= 1
            if self._cursor >= len(self._backends):
                self._cursor = 0

    def allocate(self, count: int | None = None) -> list[BackendRecord]:
        """Hand out ``count`` back-ends cycling from the cursor.

        ``count=None`` means one slot per registered back-end. Entries repeat
        when ``count`` exceeds the number of back-ends.
        """
        with self._lock:
            m = len(self._backends)
            if m == 0:
                raise NoBackendsAvailable("no back-ends registered")
            if count is None:
                count = m
            if count < 1:
                raise ValueError("count must be positive")
            out = [self._backends[(self._cursor + i) % m] for i in range(count)]
            self._cursor = (self._cursor + count) % m
            return out


# -- TCP service ---------------------------------------------------------------


class SchedulerServer:
    """Wire front for a Scheduler.

    register {host, port}      -> allocation {backendId}
    allocate {count?}          -> allocation {servers, total}
    stop {backendId}           -> allocation {servers}   (deregistration)
    stop {}                    -> process shutdown
    ping                       -> pong {backends}
    """

    def __init__(self, host: str, port: int, scheduler: Scheduler | None = None) -> None:
        self.host = host
        self.port = port
        self.scheduler = scheduler or Scheduler()
        self.stopped = asyncio.Event()
        self._server: asyncio.base_events.Server | None = None
        self._conns: set[wire.ObjectConnection] = set()

    async def start(self) -> None:
        self._server = await wire.serve_objects(self._handle, self.host, self.port)
        if not self.port:
            self.port = self._server.sockets[0].getsockname()[1]
        log.info("scheduler listening on %s:%s", self.host, self.port)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            for conn in list(self._conns):
                await conn.close()
            await self._server.wait_closed()
        self.stopped.set()

    async def serve_forever(self) -> None:
        await self.start()
        await self.stopped.wait()
        await self.close()

    async def _handle(self, conn: wire.ObjectConnection) -> None:
        self._conns.add(conn)
        try:
            async for obj in conn:
                env = wire.check_envelope(obj)
                reply = self.dispatch(env)
                if reply is not None:
                    await conn.send(reply)
                if env["type"] == "stop" and "backendId" not in env["payload"]:
                    self.stopped.set()
                    return
        finally:
            self._conns.discard(conn)

    def dispatch(self, env: dict[str, Any]) -> dict[str, Any] | None:
        t, mid, p = env["type"], env["id"], env["payload"]
        sched = self.scheduler
        try:
            if t == "register":
                bid = sched.register_backend(p["host"], int(p["port"]))
                log.info("registered back-end %s", bid)
                return wire.envelope("allocation", mid, {"backendId": bid})
            if t == "allocate":
                servers = sched.allocate(p.get("count"))
                return wire.envelope(
                    "allocation",
                    mid,
                    {"servers": [s.to_json() for s in servers], "total": len(sched.backends)},
                )
            if t == "stop" and "backendId" in p:
                sched.deregister_backend(p["backendId"])
                log.info("deregistered back-end %s", p["backendId"])
                return wire.envelope("allocation", mid, {"servers": [b.to_json() for b in sched.backends]})
            if t == "stop":
                return None
            if t == "ping":
                return wire.envelope("pong", mid, {"role": "scheduler", "backends": len(sched.backends)})
        except NoBackendsAvailable as exc:
            return wire.envelope("error", mid, {"code": "NoBackendsAvailable", "message": str(exc)})
        except UnknownBackend as exc:
            return wire.envelope("error", mid, {"code": "UnknownBackend", "message": str(exc)})
        except (KeyError, TypeError, ValueError) as exc:
            return wire.envelope("error", mid, {"code": "BadRequest", "message": repr(exc)})
        return wire.envelope("error", mid, {"code": "BadRequest", "message": f"unexpected {t}"})


class SchedulerClient:
    """Persistent request/reply link to the scheduler, reconnecting on loss."""

    _ids = itertools.count(1)

    def __init__(self, host: str, port: int, timeout: float = 5.0) -> None:
        self.host = host
        self.port = port
        self.timeout = timeout
        self._conn: wire.ObjectConnection | None = None
        self._reader: asyncio.Task | None = None
        self._waiters: dict[str, asyncio.Future] = {}
        self._connect_lock = asyncio.Lock()

    async def _ensure(self) -> wire.ObjectConnection:
        async with self._connect_lock:
            if self._conn is None or self._conn.closed:
                self._conn = await wire.open_object_connection(self.host, self.port, self.timeout)
                self._reader = asyncio.create_task(self._read(self._conn))
            return self._conn

    async def _read(self, conn: wire.ObjectConnection) -> None:
        exc: Exception = wire.ConnectionLost("scheduler connection closed")
        try:
            async for obj in conn:
                fut = self._waiters.pop(obj.get("id"), None)
                if fut is not None and not fut.done():
                    fut.set_result(obj)
        except (wire.WireError, OSError) as e:
            exc = e
        finally:
            conn.closed = True
            for fut in self._waiters.values():
                if not fut.done():
                    fut.set_exception(wire.ConnectionLost(str(exc)))
            self._waiters.clear()

    async def request(self, type_: str, payload: dict[str, Any]) -> dict[str, Any]:
        conn = await self._ensure()
        mid = f"s{next(self._ids)}"
        fut = asyncio.get_running_loop().create_future()
        self._waiters[mid] = fut
        try:
            await conn.send(wire.envelope(type_, mid, payload))
            return await asyncio.wait_for(fut, self.timeout)
        finally:
            self._waiters.pop(mid, None)

    async def register(self, host: str, port: int) -> str:
        reply = await self.request("register", {"host": host, "port": port})
        _raise_on_error(reply)
        return reply["payload"]["backendId"]

    async def allocate(self, count: int | None = None) -> tuple[list[dict[str, Any]], int]:
        reply = await self.request("allocate", {} if count is None else {"count": count})
        _raise_on_error(reply)
        return reply["payload"]["servers"], reply["payload"]["total"]

    async def deregister(self, backend_id: str) -> None:
        reply = await self.request("stop", {"backendId": backend_id})
        _raise_on_error(reply)

    async def wait_closed(self) -> None:
        if self._reader is not None:
            await asyncio.gather(self._reader, return_exceptions=True)

    async def close(self) -> None:
        if self._conn is not None:
            await self._conn.close()
        if self._reader is not None:
            await asyncio.gather(self._reader, return_exceptions=True)


def _raise_on_error(reply: dict[str, Any]) -> None:
    if reply["type"] != "error":
        return
    code = reply["payload"].get("code")
    msg = reply["payload"].get("message", "")
    if code == "NoBackendsAvailable":
        raise NoBackendsAvailable(msg)
    if code == "UnknownBackend":
        raise UnknownBackend(msg)
    raise RuntimeError(f"scheduler error {code}: {msg}")
