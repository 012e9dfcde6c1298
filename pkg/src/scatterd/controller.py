"""Supervisor for the scheduler, back-ends and front-ends of one cluster.

Start order is scheduler, back-ends, front-ends; shutdown is the reverse.
Health comes from two sources: ping/pong heartbeats over each component's
wire port, and process-exit notifications for locally spawned children.
Both feed one supervision loop, which restarts failed components with
exponential backoff and gives up after a run of failed restarts.
"""

from __future__ import annotations

import asyncio
import ctypes
import json
import logging
import os
import signal
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import wire
from .config import ClusterConfig, state_path
from .scheduler import SchedulerClient

log = logging.getLogger(__name__)

STARTING, RUNNING, DEAD, RESTARTING, STOPPED = "starting", "running", "dead", "restarting", "stopped"


class StartupTimeout(RuntimeError):
    pass


class RestartStorm(RuntimeError):
    pass


@dataclass
class ProcessState:
    name: str
    role: str
    host: str
    port: int
    http_port: int | None = None
    external: bool = False
    status: str = STARTING
    restart_count: int = 0
    next_backoff_ms: int = 0
    consecutive_failures: int = 0
    pid: int | None = None
    running_since: float | None = None
    misses: int = 0
    forced_kill: bool = False
    storm: bool = False
    proc: asyncio.subprocess.Process | None = field(default=None, repr=False)

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "role": self.role,
            "endpoint": self.endpoint,
            "httpPort": self.http_port,
            "external": self.external,
            "status": self.status,
            "restartCount": self.restart_count,
            "nextBackoffMs": self.next_backoff_ms,
            "pid": self.pid,
            "forcedKill": self.forced_kill,
            "restartStorm": self.storm,
        }


def backoff_ms(consecutive_failures: int, base_ms: int = 500, cap_ms: int = 30000) -> int:
    return min(cap_ms, base_ms * (2 ** consecutive_failures))


def _die_with_parent() -> None:
    # Linux only: children get SIGTERM if the controller disappears
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.prctl(1, signal.SIGTERM)  # PR_SET_PDEATHSIG
    except OSError:
        pass


class Controller:
    def __init__(self, config: ClusterConfig, state_file: str | os.PathLike | None = None, log_dir=None) -> None:
        self.config = config
        if state_file is None and config.path:
            state_file = state_path(config.path)
        self.state_file = Path(state_file) if state_file else None
        self.log_dir = Path(log_dir) if log_dir else (
            self.state_file.with_name(self.state_file.name.replace(".state.json", "") + ".logs")
            if self.state_file
            else None
        )
        self.components: list[ProcessState] = []
        sched = config.scheduler
        self.components.append(ProcessState("scheduler", "scheduler", sched.host, sched.port))
        for i, b in enumerate(config.backends):
            self.components.append(ProcessState(f"backend-{i}", "backend", b["host"], b["port"], external=b["external"]))
        for i, f in enumerate(config.frontends):
            self.components.append(ProcessState(f"frontend-{i}", "frontend", f["host"], f["port"], http_port=f["httpPort"]))
        self.events: asyncio.Queue = asyncio.Queue()
        self._tasks: set[asyncio.Task] = set()
        self._restarting: dict[str, asyncio.Task] = {}
        self._conns: dict[str, wire.ObjectConnection] = {}
        self._ping_ids = 0
        self._sched_client: SchedulerClient | None = None
        self._stopping = False
        self._shutdown_done = False
        self.shutdown_requested = asyncio.Event()

    # -- helpers -------------------------------------------------------------

    @property
    def interval(self) -> float:
        return self.config.heartbeat_interval_ms / 1000.0

    def by_role(self, role: str) -> list[ProcessState]:
        return [c for c in self.components if c.role == role]

    def component(self, name: str) -> ProcessState:
        return next(c for c in self.components if c.name == name)

    def _spawn_task(self, coro) -> asyncio.Task:
        t = asyncio.create_task(coro)
        self._tasks.add(t)
        t.add_done_callback(self._tasks.discard)
        return t

    def command(self, comp: ProcessState) -> list[str]:
        cfg = self.config
        base = [sys.executable, "-m", "scatterd"]
        sched = f"{cfg.scheduler.host}:{cfg.scheduler.port}"
        if comp.role == "scheduler":
            return base + ["scheduler", "--host", comp.host, "--port", str(comp.port)]
        if comp.role == "backend":
            cmd = base + ["backend", "--host", comp.host, "--port", str(comp.port), "--scheduler", sched,
                          "--data-dir", cfg.data_dir]
            if cfg.backend_concurrency:
                cmd += ["--concurrency", str(cfg.backend_concurrency)]
            if cfg.stats_port_offset:
                cmd += ["--stats-port", str(comp.port + cfg.stats_port_offset)]
            return cmd
        return base + [
            "frontend", "--host", comp.host, "--port", str(comp.port), "--http-port", str(comp.http_port),
            "--scheduler", sched, "--data-dir", cfg.data_dir,
            "--split-threshold", str(cfg.split_threshold), "--inflight", str(cfg.default_inflight),
            "--drain-timeout-ms", str(cfg.stop_timeout_ms),
        ]

    def write_state(self) -> None:
        if self.state_file is None:
            return
        doc = {
            "controllerPid": os.getpid(),
            "config": self.config.path,
            "updated": time.time(),
            "shutdown": self._shutdown_done,
            "components": [c.to_json() for c in self.components],
        }
        tmp = self.state_file.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, self.state_file)

    def status_lines(self) -> list[str]:
        return format_status({"controllerPid": os.getpid(), "components": [c.to_json() for c in self.components]})

    def _set(self, comp: ProcessState, status: str) -> None:
        if comp.status != status:
            log.info("%s %s -> %s", comp.name, comp.status, status)
            comp.status = status
            self.write_state()

    # -- processes & pings ------------------------------------------------------

    async def _spawn(self, comp: ProcessState) -> None:
        out = None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            out = open(self.log_dir / f"{comp.name}.log", "ab")
        env = dict(os.environ)
        env.setdefault("SCATTERD_LOG_LEVEL", os.environ.get("SCATTERD_LOG_LEVEL", "info"))
        try:
            comp.proc = await asyncio.create_subprocess_exec(
                *self.command(comp),
                stdin=asyncio.subprocess.DEVNULL,
                stdout=out or asyncio.subprocess.DEVNULL,
                stderr=out or None,
                env=env,
                start_new_session=True,
                preexec_fn=_die_with_parent,
            )
        finally:
            if out is not None:
                out.close()
        comp.pid = comp.proc.pid
        comp.misses = 0
        self._drop_conn(comp)
        self._spawn_task(self._watch_exit(comp, comp.proc))

    async def _watch_exit(self, comp: ProcessState, proc: asyncio.subprocess.Process) -> None:
        code = await proc.wait()
        await self.events.put(("exited", comp.name, proc, code))

    def _drop_conn(self, comp: ProcessState) -> None:
        conn = self._conns.pop(comp.name, None)
        if conn is not None:
            self._spawn_task(conn.close())

    async def ping(self, comp: ProcessState, timeout: float | None = None) -> dict[str, Any] | None:
        """One heartbeat round-trip; None on any failure."""
        timeout = timeout or self.interval
        try:
            conn = self._conns.get(comp.name)
            if conn is None or conn.closed:
                conn = await wire.open_object_connection(comp.host, comp.port, timeout)
                self._conns[comp.name] = conn
            self._ping_ids += 1
            mid = f"hb{self._ping_ids}"
            await conn.send(wire.envelope("ping", mid))
            while True:
                reply = await asyncio.wait_for(conn.receive(), timeout)
                if reply is None:
                    raise wire.ConnectionLost("closed")
                if reply.get("id") == mid:
                    return reply["payload"] if reply.get("type") == "pong" else None
        except (OSError, asyncio.TimeoutError, wire.WireError):
            self._drop_conn(comp)
            return None

    def _healthy(self, comp: ProcessState, pong: dict[str, Any] | None) -> bool:
        if pong is None:
            return False
        if comp.role == "backend" and not comp.external:
            return bool(pong.get("registered"))
        return True

    async def _wait_ready(self, comp: ProcessState, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        proc = comp.proc
        while time.monotonic() < deadline:
            if proc is not None and proc.returncode is not None:
                return False
            if self._healthy(comp, await self.ping(comp, timeout=min(1.0, self.interval))):
                return True
            await asyncio.sleep(0.05)
        return False

    async def _launch(self, comp: ProcessState) -> bool:
        await self._spawn(comp)
        ok = await self._wait_ready(comp, self.config.startup_timeout_ms / 1000.0)
        if not ok:
            await self._kill(comp)
        return ok

    async def _kill(self, comp: ProcessState) -> None:
        proc = comp.proc
        if proc is None or proc.returncode is not None:
            return
        try:
            proc.kill()
        except ProcessLookupError:
            pass
        await proc.wait()

    async def _scheduler(self) -> SchedulerClient:
        if self._sched_client is None:
            s = self.config.scheduler
            self._sched_client = SchedulerClient(s.host, s.port, timeout=2.0)
        return self._sched_client

    async def _deregister(self, comp: ProcessState) -> None:
        try:
            await (await self._scheduler()).deregister(f"{comp.host}:{comp.port}")
        except Exception as exc:  # scheduler may itself be down or never saw it
            log.debug("deregister %s: %s", comp.name, exc)

    # -- lifecycle -------------------------------------------------------------

    async def start_all(self) -> None:
        self.write_state()
        timeout = self.config.startup_timeout_ms / 1000.0
        for role in ("scheduler", "backend", "frontend"):
            group = self.by_role(role)
            local = [c for c in group if not c.external]
            for c in local:
                await self._spawn(c)
            results = await asyncio.gather(*(self._wait_ready(c, timeout) for c in group))
            for c, ok in zip(group, results):
                if ok:
                    c.running_since = time.monotonic()
                    self._set(c, RUNNING)
                elif c.external:
                    log.warning("external %s at %s is not answering", c.name, c.endpoint)
                    self._set(c, DEAD)
                else:
                    self._set(c, DEAD)
                    await self.shutdown_all()
                    raise StartupTimeout(f"{c.name} ({c.role} at {c.endpoint}) did not become ready in {timeout:.0f}s")
        for c in self.components:
            self._spawn_task(self._heartbeat(c))

    async def _heartbeat(self, comp: ProcessState) -> None:
        while not self._stopping:
            await asyncio.sleep(self.interval)
            if self._stopping:
                return
            if comp.status == RUNNING:
                pong = await self.ping(comp)
                if pong is not None:
                    comp.misses = 0
                    if comp.consecutive_failures and time.monotonic() - (comp.running_since or 0) >= self.config.stable_after_ms / 1000.0:
                        comp.consecutive_failures = 0
                        comp.next_backoff_ms = 0
                else:
                    comp.misses += 1
                    if comp.misses >= self.config.missed_heartbeats:
                        await self.events.put(("unhealthy", comp.name, comp.proc, None))
            elif comp.status == DEAD and comp.external and not comp.storm:
                if await self.ping(comp) is not None:
                    await self.events.put(("recovered", comp.name, None, None))

    async def monitor_loop(self) -> None:
        """Consume health events until shutdown; restarts are serialized per component."""
        while not self._stopping:
            try:
                kind, name, proc, code = await asyncio.wait_for(self.events.get(), 0.5)
            except asyncio.TimeoutError:
                continue
            if self._stopping:
                return
            comp = self.component(name)
            if kind == "exited" and proc is not comp.proc:
                continue  # stale notification for a replaced process
            if kind == "recovered":
                await self._recovered(comp)
                continue
            if comp.status != RUNNING or name in self._restarting:
                continue
            log.warning("%s %s (exit code %s)", name, "exited" if kind == "exited" else "missed heartbeats", code)
            stable = self.config.stable_after_ms / 1000.0
            if comp.running_since is not None and time.monotonic() - comp.running_since < stable:
                comp.consecutive_failures += 1
            else:
                comp.consecutive_failures = 0
            comp.running_since = None
            self._set(comp, DEAD)
            task = self._spawn_task(self._restart(comp))
            self._restarting[name] = task
            task.add_done_callback(lambda _t, n=name: self._restarting.pop(n, None))

    async def _recovered(self, comp: ProcessState) -> None:
        if comp.role == "backend":
            try:
                await (await self._scheduler()).register(comp.host, comp.port)
            except Exception as exc:
                log.warning("could not re-register %s: %s", comp.name, exc)
                return
        comp.running_since = time.monotonic()
        comp.misses = 0
        self._set(comp, RUNNING)

    async def _restart(self, comp: ProcessState) -> None:
        if comp.role == "backend":
            await self._deregister(comp)
        if comp.external:
            return  # not ours to spawn; heartbeat watches for it to come back
        await self._kill(comp)
        cfg = self.config
        while not self._stopping:
            if comp.consecutive_failures >= cfg.max_consecutive_restarts:
                comp.storm = True
                self._set(comp, DEAD)
                log.error("%s", RestartStorm(f"{comp.name} failed {comp.consecutive_failures} restarts in a row; left dead"))
                return
            comp.next_backoff_ms = backoff_ms(comp.consecutive_failures, cfg.backoff_base_ms, cfg.backoff_cap_ms)
            self._set(comp, RESTARTING)
            self.write_state()
            await asyncio.sleep(comp.next_backoff_ms / 1000.0)
            if self._stopping:
                return
            comp.restart_count += 1
            if await self._launch(comp):
                comp.running_since = time.monotonic()
                comp.misses = 0
                self._set(comp, RUNNING)
                return
            comp.consecutive_failures += 1
            log.warning("restart %d of %s failed", comp.restart_count, comp.name)

    async def shutdown_all(self) -> None:
        if self._shutdown_done:
            return
        self._shutdown_done = True
        self._stopping = True
        for t in list(self._restarting.values()):
            t.cancel()
        for role in ("frontend", "backend", "scheduler"):
            group = [c for c in self.by_role(role) if not c.external]
            await asyncio.gather(*(self._stop_one(c) for c in group))
        for name in list(self._conns):
            conn = self._conns.pop(name)
            await conn.close()
        if self._sched_client is not None:
            await self._sched_client.close()
        current = asyncio.current_task()
        for t in list(self._tasks):
            if t is not current:
                t.cancel()
        self.write_state()

    async def _stop_one(self, comp: ProcessState) -> None:
        proc = comp.proc
        if proc is None or proc.returncode is not None:
            self._set(comp, STOPPED)
            return
        try:
            conn = await wire.open_object_connection(comp.host, comp.port, 1.0)
            await conn.send(wire.envelope("stop", f"stop-{comp.name}"))
            await conn.close()
        except (OSError, asyncio.TimeoutError, wire.WireError):
            try:
                proc.terminate()
            except ProcessLookupError:
                pass
        try:
            await asyncio.wait_for(proc.wait(), self.config.stop_timeout_ms / 1000.0)
        except asyncio.TimeoutError:
            comp.forced_kill = True
            log.error("%s ignored stop for %.0fs; killing", comp.name, self.config.stop_timeout_ms / 1000.0)
            await self._kill(comp)
        self._set(comp, STOPPED)

    async def run(self) -> int:
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, self.shutdown_requested.set)
        try:
            await self.start_all()
        except StartupTimeout as exc:
            log.error("%s", exc)
            return 2
        monitor = asyncio.create_task(self.monitor_loop())
        await self.shutdown_requested.wait()
        await self.shutdown_all()
        monitor.cancel()
        await asyncio.gather(monitor, return_exceptions=True)
        return 0


# -- CLI helpers (operate on the state file) -----------------------------------


def read_state(config_path: str | os.PathLike) -> dict[str, Any] | None:
    p = state_path(config_path)
    try:
        return json.loads(p.read_text())
    except (FileNotFoundError, json.JSONDecodeError):
        return None


def pid_alive(pid: int | None) -> bool:
    if not pid:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    # zombies count as gone
    try:
        with open(f"/proc/{pid}/stat") as fh:
            return fh.read().split(")")[-1].split()[0] != "Z"
    except OSError:
        return True


def format_status(state: dict[str, Any]) -> list[str]:
    lines = [f"controller\t-\trunning\t0\tpid={state.get('controllerPid')}"]
    for c in state.get("components", []):
        lines.append(f"{c['role']}\t{c['endpoint']}\t{c['status']}\t{c['restartCount']}\tpid={c.get('pid')}")
    return lines


def stop_controller(config_path: str | os.PathLike, timeout: float = 60.0) -> bool:
    """Ask a running controller to shut its cluster down; False if none was running."""
    state = read_state(config_path)
    pid = state.get("controllerPid") if state else None
    if not pid_alive(pid):
        return False
    os.kill(pid, signal.SIGTERM)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if not pid_alive(pid):
            return True
        time.sleep(0.1)
    raise TimeoutError(f"controller pid {pid} still alive after {timeout:.0f}s")
