"""Cluster launchers for tests and benchmark experiments.

``InProcessCluster`` runs scheduler, back-ends and front-end as asyncio
servers in the current event loop. ``LocalCluster`` goes through the real
controller executable and child processes.
"""

from __future__ import annotations

import asyncio
import json
import os
import random
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path
from typing import Any, Callable

from .backend import BackendServer
from .controller import pid_alive, read_state
from .frontend import FrontendServer
from .registry import Registry
from .scheduler import SchedulerServer


def _free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return False
    return True


def free_ports(n: int, stats_offset: int | None = 1000) -> list[int]:
    """``n`` currently unused ports (each with ``port + stats_offset`` free too)."""
    out: list[int] = []
    taken: set[int] = set()
    rng = random.Random()
    while len(out) < n:
        # stay below the kernel's ephemeral range (32768+ on Linux) so client sockets can't take them
        p = rng.randrange(15000, 31000)
        extra = [p + stats_offset] if stats_offset else []
        if p in taken or any(e in taken for e in extra):
            continue
        if _free(p) and all(_free(e) for e in extra):
            out.append(p)
            taken.update([p, *extra])
    return out


class InProcessCluster:
    def __init__(
        self,
        registry_factory: Callable[[], Registry],
        backends: int = 2,
        split_threshold: int = 1000,
        inflight: int = 10,
        concurrency: int | None = None,
    ) -> None:
        self.registry_factory = registry_factory
        self.n_backends = backends
        self.split_threshold = split_threshold
        self.inflight = inflight
        self.concurrency = concurrency
        self.scheduler: SchedulerServer | None = None
        self.backends: list[BackendServer] = []
        self.frontend: FrontendServer | None = None

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.frontend.http_port}"

    async def add_backend(self) -> BackendServer:
        (port,) = free_ports(1, None)
        be = BackendServer(
            "127.0.0.1", port, self.registry_factory(), scheduler=("127.0.0.1", self.scheduler.port),
            concurrency=self.concurrency,
        )
        await be.start()
        await asyncio.wait_for(be.registered.wait(), 10)
        self.backends.append(be)
        return be

    async def __aenter__(self) -> "InProcessCluster":
        sport, hport = free_ports(2, None)
        self.scheduler = SchedulerServer("127.0.0.1", sport)
        await self.scheduler.start()
        for _ in range(self.n_backends):
            await self.add_backend()
        self.frontend = FrontendServer(
            self.registry_factory(), ("127.0.0.1", sport), http_port=hport,
            split_threshold=self.split_threshold, default_inflight=self.inflight, drain_timeout=2.0,
        )
        await self.frontend.start()
        return self

    async def __aexit__(self, *exc) -> None:
        if self.frontend is not None:
            await self.frontend.close()
        for be in self.backends:
            await be.close()
        if self.scheduler is not None:
            await self.scheduler.close()


class LocalCluster:
    """A cluster started through ``scatterd controller start`` in a subprocess."""

    def __init__(
        self,
        workdir: str | os.PathLike,
        data_dir: str | os.PathLike,
        backends: int = 4,
        frontends: int = 1,
        **overrides: Any,
    ) -> None:
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        ports = free_ports(1 + backends + 2 * frontends)
        self.config: dict[str, Any] = {
            "schedulerEndpoint": {"host": "127.0.0.1", "port": ports[0]},
            "backends": [{"host": "127.0.0.1", "port": p} for p in ports[1 : 1 + backends]],
            "frontends": [
                {"host": "127.0.0.1", "port": ports[1 + backends + 2 * i], "httpPort": ports[2 + backends + 2 * i]}
                for i in range(frontends)
            ],
            "dataDir": str(Path(data_dir).resolve()),
        }
        self.config.update(overrides)
        self.config_path = self.workdir / "cluster.json"
        self.proc: subprocess.Popen | None = None

    @property
    def urls(self) -> list[str]:
        return [f"http://127.0.0.1:{f['httpPort']}" for f in self.config["frontends"]]

    def state(self) -> dict[str, Any]:
        return read_state(self.config_path) or {"components": []}

    def components(self, role: str | None = None) -> list[dict[str, Any]]:
        return [c for c in self.state()["components"] if role is None or c["role"] == role]

    def targets(self) -> list[tuple[str, int]]:
        st = self.state()
        return [("controller", self.proc.pid)] + [(c["role"], c["pid"]) for c in st["components"] if c.get("pid")]

    def wait_for(self, predicate: Callable[[dict[str, Any]], bool], timeout: float, poll: float = 0.05) -> float:
        """Seconds until ``predicate(state)`` held; TimeoutError otherwise."""
        t0 = time.monotonic()
        while time.monotonic() - t0 < timeout:
            st = read_state(self.config_path)
            if st is not None and predicate(st):
                return time.monotonic() - t0
            if self.proc is not None and self.proc.poll() is not None:
                raise RuntimeError(f"controller exited with {self.proc.returncode}")
            time.sleep(poll)
        raise TimeoutError(f"cluster state condition not met within {timeout}s")

    def all_running(self, st: dict[str, Any]) -> bool:
        comps = st.get("components", [])
        return bool(comps) and all(c["status"] == "running" for c in comps)

    def start(self, timeout: float = 90.0) -> "LocalCluster":
        self.config_path.write_text(json.dumps(self.config, indent=1))
        state = self.config_path.with_name(self.config_path.name + ".state.json")
        if state.exists():
            state.unlink()
        env = dict(os.environ)
        env.setdefault("SCATTERD_LOG_LEVEL", "info")
        self._log = open(self.workdir / "controller.log", "ab")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "scatterd", "controller", "start", str(self.config_path)],
            stdout=self._log, stderr=self._log, env=env,
        )
        self.wait_for(lambda st: st.get("controllerPid") == self.proc.pid and self.all_running(st), timeout)
        return self

    def child_pids(self) -> list[int]:
        return [c["pid"] for c in self.components() if c.get("pid")]

    def stop(self, timeout: float = 60.0) -> int:
        if self.proc is None:
            return 0
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for pid in self.child_pids():
            if pid_alive(pid):
                os.kill(pid, signal.SIGKILL)
        self._log.close()
        return self.proc.returncode

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
