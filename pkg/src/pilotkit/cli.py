"""Command-line entry point.

Data goes to stdout, diagnostics to stderr; the exit status is 0 only when
the command did what it was asked.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, PilotkitError
from .events import EventLog
from .harness import Scenario, run_comparison, speedup_line
from .metrics import format_table
from .model import DcrDescriptor, PilotSpec, WorkloadSpec, load_json
from .pilots import ProvisioningPolicy
from .server import ControlClient, ManagerServer, run_server
from .workload import SchedulingPolicy

log = logging.getLogger("pilotkit")

DEFAULT_ADDR = "127.0.0.1:7420"
EXIT_OK, EXIT_ERROR = 0, 1


@dataclass
class ManagerOptions:
    provisioning: ProvisioningPolicy | None = None
    scheduling: SchedulingPolicy | None = None
    max_attempts: int = 1
    rebind_on_pilot_loss: bool = False
    bootstrap_timeout: float = 60.0
    heartbeat_interval: float | None = 5.0
    release_when_idle: bool = False

    _FIELDS = (
        "provisioning", "scheduling", "max_attempts", "rebind_on_pilot_loss",
        "bootstrap_timeout", "heartbeat_interval", "release_when_idle",
    )

    @classmethod
    def from_dict(cls, doc: dict[str, Any], path: str | None = None) -> ManagerOptions:
        unknown = sorted(set(doc) - set(cls._FIELDS))
        if unknown:
            raise ConfigError("unknown field in policy file", path=path, field=unknown[0])
        try:
            return cls(
                provisioning=ProvisioningPolicy.from_dict(doc["provisioning"], path) if "provisioning" in doc else None,
                scheduling=SchedulingPolicy.from_dict(doc["scheduling"]) if "scheduling" in doc else None,
                max_attempts=int(doc.get("max_attempts", 1)),
                rebind_on_pilot_loss=bool(doc.get("rebind_on_pilot_loss", False)),
                bootstrap_timeout=float(doc.get("bootstrap_timeout", 60.0)),
                heartbeat_interval=doc.get("heartbeat_interval", 5.0),
                release_when_idle=bool(doc.get("release_when_idle", False)),
            )
        except ConfigError as exc:
            raise ConfigError(exc.message, path=path, field=exc.field) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), path=path) from None


@dataclass
class CliConfig:
    listen: str = DEFAULT_ADDR
    dcrs: list[DcrDescriptor] = field(default_factory=list)
    event_log: str | None = None
    options: ManagerOptions = field(default_factory=ManagerOptions)

    @classmethod
    def load(cls, path: str | Path) -> CliConfig:
        path = Path(path)
        doc = load_json(path)
        if not isinstance(doc, dict):
            raise ConfigError("expected a JSON object", path=str(path))
        unknown = sorted(set(doc) - {"listen", "dcrs", "event_log", "policy"})
        if unknown:
            raise ConfigError("unknown field in config", path=str(path), field=unknown[0])
        base = path.parent
        dcrs = []
        for i, entry in enumerate(doc.get("dcrs", [])):
            if isinstance(entry, str):
                file = base / entry
                if not file.exists():
                    raise ConfigError("file not found", path=str(file), field=f"dcrs[{i}]")
                dcrs.append(DcrDescriptor.from_dict(load_json(file), path=str(file)))
            else:
                dcrs.append(DcrDescriptor.from_dict(entry, path=str(path)))
        options = ManagerOptions()
        policy = doc.get("policy")
        if isinstance(policy, str):
            file = base / policy
            if not file.exists():
                raise ConfigError("file not found", path=str(file), field="policy")
            options = ManagerOptions.from_dict(load_json(file), path=str(file))
        elif isinstance(policy, dict):
            options = ManagerOptions.from_dict(policy, path=str(path))
        log_path = doc.get("event_log")
        return cls(
            listen=doc.get("listen", DEFAULT_ADDR),
            dcrs=dcrs,
            event_log=str(base / log_path) if log_path else None,
            options=options,
        )


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"expected host:port, got {addr!r}", field="listen")
    return host, int(port)


# -- subcommands ------------------------------------------------------------


def cmd_manager_run(args: argparse.Namespace) -> int:
    config = CliConfig.load(args.config) if args.config else CliConfig()
    listen = args.listen or config.listen
    host, port = _split_addr(listen)
    events = EventLog(args.log or config.event_log)
    opts = config.options
    server = ManagerServer(
        config.dcrs, events,
        host=host, port=port,
        provisioning=opts.provisioning,
        scheduling=opts.scheduling,
        max_attempts=opts.max_attempts,
        rebind_on_pilot_loss=opts.rebind_on_pilot_loss,
        bootstrap_timeout=opts.bootstrap_timeout,
        heartbeat_interval=opts.heartbeat_interval,
        release_when_idle=opts.release_when_idle,
    )

    def ready(s: ManagerServer) -> None:
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, s.stop)
        print(f"manager ready on {s.address}", flush=True)

    asyncio.run(run_server(server, ready))
    return EXIT_OK


def _client(args: argparse.Namespace) -> ControlClient:
    return ControlClient(args.manager or os.environ.get("PILOTKIT_MANAGER_ADDR") or DEFAULT_ADDR)


def cmd_submit_pilot(args: argparse.Namespace) -> int:
    spec = PilotSpec.from_dict(load_json(args.file), path=args.file)
    print(_client(args).request("submit_pilot", pilot=spec.to_dict()))
    return EXIT_OK


def cmd_submit_workload(args: argparse.Namespace) -> int:
    spec = WorkloadSpec.from_dict(load_json(args.file), path=args.file)
    print(_client(args).request("submit_workload", workload=spec.to_dict()))
    return EXIT_OK


def cmd_status(args: argparse.Namespace) -> int:
    print(json.dumps(_client(args).request("status", entity_id=args.entity_id), indent=2))
    return EXIT_OK


def cmd_cancel(args: argparse.Namespace) -> int:
    kind = _client(args).request("cancel", entity_id=args.entity_id)
    print(f"canceled {kind} {args.entity_id}")
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    scenario = Scenario.load(args.scenario)
    out = Path(args.out) if args.out else Path(f"experiment-{scenario.name}")
    direct, pilot = run_comparison(scenario, out)
    if args.table:
        sys.stdout.write(format_table([direct, pilot]))
    print(speedup_line(direct, pilot))
    log.info("reports and event logs written to %s", out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilotkit", description="Pilot-job manager and experiments.")
    parser.add_argument("--config", help="manager config file (JSON)")
    parser.add_argument("--log", help="event log path (JSON lines)")
    parser.add_argument("--manager", help="manager address host:port (default $PILOTKIT_MANAGER_ADDR)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manager-run", help="serve the agent protocol and control API")
    p.add_argument("--listen", help=f"listen address (default from config or {DEFAULT_ADDR})")
    p.set_defaults(func=cmd_manager_run)

    p = sub.add_parser("submit-pilot", help="submit a pilot description")
    p.add_argument("file")
    p.set_defaults(func=cmd_submit_pilot)

    p = sub.add_parser("submit-workload", help="submit a workload description")
    p.add_argument("file")
    p.set_defaults(func=cmd_submit_workload)

    p = sub.add_parser("status", help="show a pilot, task or workload")
    p.add_argument("entity_id")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("cancel", help="cancel a pilot, task or workload")
    p.add_argument("entity_id")
    p.set_defaults(func=cmd_cancel)

    p = sub.add_parser("experiment", help="run the direct vs pilot comparison on the simulator")
    p.add_argument("scenario")
    p.add_argument("--out", help="directory for reports and event logs")
    p.add_argument("--table", action="store_true", help="also print the report table")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except PilotkitError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
