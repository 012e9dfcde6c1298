"""Single executable; the first argument selects the role.

    scatterd controller start|stop|status <config.json>
    scatterd scheduler --host H --port P
    scatterd backend --host H --port P --scheduler H:P --data-dir D
    scatterd frontend --host H --port P --http-port N --scheduler H:P --data-dir D
    scatterd dataset generate --seed N --from D --to D --docs-per-day N --out DIR
    scatterd loadgen run|monitor|compare ...
    scatterd experiment oracle|gzip|tune|scaling|load|recovery ...
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from datetime import date

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging(role: str) -> None:
    level = LOG_LEVELS.get(os.environ.get("SCATTERD_LOG_LEVEL", "info").lower(), logging.INFO)
    logging.basicConfig(
        level=level,
        format=f"%(asctime)s {role}[%(process)d] %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _endpoint(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def _build_registry(data_dir: str):
    from .dataset import DocumentStore, cloud_index_usecase
    from .registry import Registry

    return Registry([cloud_index_usecase(DocumentStore(data_dir))])


# -- roles ---------------------------------------------------------------------


def cmd_scheduler(args) -> int:
    from .scheduler import SchedulerServer

    asyncio.run(SchedulerServer(args.host, args.port).serve_forever())
    return 0


def cmd_backend(args) -> int:
    from .backend import BackendServer

    async def main():
        server = BackendServer(
            args.host,
            args.port,
            _build_registry(args.data_dir),
            scheduler=_endpoint(args.scheduler) if args.scheduler else None,
            concurrency=args.concurrency,
            stats_port=args.stats_port,
        )
        await server.serve_forever()

    asyncio.run(main())
    return 0


def cmd_frontend(args) -> int:
    from .frontend import FrontendServer

    async def main():
        server = FrontendServer(
            _build_registry(args.data_dir),
            _endpoint(args.scheduler),
            http_host=args.host,
            http_port=args.http_port,
            control_port=args.port,
            split_threshold=args.split_threshold,
            default_inflight=args.inflight,
            drain_timeout=args.drain_timeout_ms / 1000.0,
        )
        await server.serve_forever()

    asyncio.run(main())
    return 0


def cmd_controller(args) -> int:
    from .config import ConfigInvalid, load_config, state_path
    from .controller import Controller, format_status, pid_alive, read_state, stop_controller

    if args.action == "start":
        try:
            cfg = load_config(args.config)
        except ConfigInvalid as exc:
            print(exc, file=sys.stderr)
            return 2
        state = read_state(args.config)
        if state and not state.get("shutdown") and pid_alive(state.get("controllerPid")):
            print(f"controller already running (pid {state['controllerPid']})", file=sys.stderr)
            return 1
        return asyncio.run(Controller(cfg, state_path(args.config)).run())
    if args.action == "stop":
        if stop_controller(args.config):
            print("cluster stopped")
        else:
            print("controller not running")
        return 0
    state = read_state(args.config)
    if state is None:
        print("no cluster state found", file=sys.stderr)
        return 3
    for line in format_status(state):
        print(line)
    if not pid_alive(state.get("controllerPid")):
        print("(controller not running; statuses are stale)", file=sys.stderr)
        return 3
    return 0


def cmd_dataset(args) -> int:
    from .dataset import GenerationConfig, generate

    cfg = GenerationConfig(
        seed=args.seed,
        start_date=date.fromisoformat(args.start),
        end_date=date.fromisoformat(args.end),
        docs_per_day=args.docs_per_day,
        levels=args.levels,
    )
    index = generate(cfg, args.out)
    print(f"wrote {len(index)} day partitions, {sum(index.values())} documents to {args.out}")
    return 0


def cmd_loadgen(args) -> int:
    from . import loadgen

    if args.action == "run":
        profile = loadgen.LoadProfile(
            target_urls=args.url,
            concurrency=args.concurrency,
            repetitions=args.repetitions,
            warmup=args.warmup,
            cooldown=args.cooldown,
            gzip=args.gzip,
        )
        report = asyncio.run(loadgen.run_load(profile, args.out))
        print(json.dumps(report.to_json(), indent=2))
        return 0 if report.error_count == 0 else 1
    if args.action == "monitor":
        targets = loadgen.targets_from_state(args.config)
        loadgen.sample_resources(targets, args.interval_ms, args.duration_ms, args.out)
        print(f"wrote {args.out}")
        return 0
    report = loadgen.compare_runs(args.baseline, args.candidate)
    print(json.dumps(report, indent=2))
    return 0


def cmd_experiment(args) -> int:
    from .experiments import main as run_experiment

    return run_experiment(args)


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scatterd", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="role", required=True)

    p = sub.add_parser("controller", help="start, stop or inspect a cluster")
    p.add_argument("action", choices=["start", "stop", "status"])
    p.add_argument("config")
    p.set_defaults(func=cmd_controller)

    p = sub.add_parser("scheduler")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.set_defaults(func=cmd_scheduler)

    p = sub.add_parser("backend")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--scheduler")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--stats-port", type=int)
    p.set_defaults(func=cmd_backend)

    p = sub.add_parser("frontend")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="control (wire) port")
    p.add_argument("--http-port", type=int, required=True)
    p.add_argument("--scheduler", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split-threshold", type=int, default=1000)
    p.add_argument("--inflight", type=int, default=10)
    p.add_argument("--drain-timeout-ms", type=int, default=10000)
    p.set_defaults(func=cmd_frontend)

    p = sub.add_parser("dataset")
    dsub = p.add_subparsers(dest="action", required=True)
    g = dsub.add_parser("generate")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--from", dest="start", required=True)
    g.add_argument("--to", dest="end", required=True, help="exclusive end date")
    g.add_argument("--docs-per-day", type=int, default=2000)
    g.add_argument("--levels", type=int, default=31)
    g.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("loadgen")
    lsub = p.add_subparsers(dest="action", required=True)
    r = lsub.add_parser("run")
    r.add_argument("--url", action="append", required=True)
    r.add_argument("--concurrency", type=int, default=1)
    r.add_argument("--repetitions", type=int, default=20)
    r.add_argument("--warmup", type=int, default=0)
    r.add_argument("--cooldown", type=int, default=0)
    r.add_argument("--gzip", action="store_true", help="send Accept-Encoding: gzip")
    r.add_argument("--out", required=True)
    m = lsub.add_parser("monitor")
    m.add_argument("--config", required=True)
    m.add_argument("--interval-ms", type=int, default=2000)
    m.add_argument("--duration-ms", type=int, required=True)
    m.add_argument("--out", required=True)
    c = lsub.add_parser("compare")
    c.add_argument("baseline")
    c.add_argument("candidate")
    p.set_defaults(func=cmd_loadgen)

    p = sub.add_parser("experiment", help="run a benchmark experiment on a local cluster")
    p.add_argument("name", choices=["oracle", "gzip", "tune", "scaling", "load", "recovery"])
    p.add_argument("--data-dir", default="data/quarter", help="generated (seed 42, 90 days) if missing")
    p.add_argument("--workdir", default="runs")
    p.add_argument("--backends", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--work-factor", type=int)
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--concurrency", type=int, default=1)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.role)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
