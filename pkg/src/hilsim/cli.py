"""Command-line entry points: the simulation server, a remotely
registered service plugin, and the measurement harness.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .bus import Reliability
from .control import ControlError, PluginSession, ServerUnavailable
from .harness import (
    HarnessError,
    compare_report,
    load_reference_table,
    measure_topic,
    packaged_reference_table,
    render_report,
    run_track_experiment,
)
from .server import FIVE_SERVICES, HiLServer, ServerConfig, StartupError
from .tcpbus import BusClient, BusError

log = logging.getLogger(__name__)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _parse_host_port(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"{value!r} must look like host:port")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{value!r} has a non-numeric port")


# -- hil-server ------------------------------------------------------------------


def server_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hil-server",
        description="Run the simulation server: world, sensors, services, bus.",
    )
    parser.add_argument("--map", required=True, help="road network JSON file")
    parser.add_argument("--dt", type=float, default=0.05, help="tick period, seconds")
    parser.add_argument(
        "--mode",
        default="realtime",
        choices=("realtime", "fast"),
        help="clock pacing (default: realtime)",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sensor-types", help="sensor type catalog YAML (default: packaged)")
    parser.add_argument("--sensor-mounts", help="sensor mount list YAML (default: packaged)")
    parser.add_argument(
        "--actuation",
        default="accel_integration",
        help="longitudinal actuation model name",
    )
    parser.add_argument("--bus-listen", help="host:port for the TCP message bus")
    parser.add_argument("--control-listen", help="host:port for the control channel")
    parser.add_argument("--scenario", help="scenario JSON to load at startup")
    parser.add_argument(
        "--duration", type=float, default=None, help="stop after this many sim seconds"
    )
    parser.add_argument(
        "--max-ticks", type=int, default=None, help="stop after this many ticks"
    )
    parser.add_argument("--map-grid-step", type=float, default=0.5)
    parser.add_argument("--map-output", help="also write the map point cloud to this file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    cfg = ServerConfig(
        map_path=args.map,
        dt=args.dt,
        mode=args.mode,
        seed=args.seed,
        sensor_types=args.sensor_types,
        sensor_mounts=args.sensor_mounts,
        actuation=args.actuation,
        bus_listen=args.bus_listen,
        control_listen=args.control_listen,
        scenario=args.scenario,
        map_grid_step=args.map_grid_step,
        map_output=args.map_output,
    )
    try:
        server = HiLServer(cfg)
    except StartupError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return 2
    info = server.session()
    print(
        f"serving map {Path(args.map).stem!r} mode={info.mode} dt={info.dt} "
        f"bus={info.sim_address} control={server.control_server.url if server.control_server else 'inproc'}"
    )
    try:
        server.run(duration_s=args.duration, max_ticks=args.max_ticks)
    except KeyboardInterrupt:
        print("interrupted, shutting down")
    finally:
        server.close()
    return 0


# -- hil-service -----------------------------------------------------------------


def service_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hil-service",
        description=(
            "Register a service name on a running server's control channel and "
            "keep it alive with heartbeats until interrupted."
        ),
    )
    parser.add_argument("--name", required=True, help="service or plugin name to register")
    parser.add_argument("--control-url", required=True, help="ws://host:port of the server")
    parser.add_argument(
        "--duration", type=float, default=None, help="exit after this many seconds"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    try:
        session = PluginSession(args.control_url, args.name)
    except ServerUnavailable as exc:
        print(f"cannot reach server: {exc}", file=sys.stderr)
        return 2
    except ControlError as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        return 3
    known = "known service" if args.name in FIVE_SERVICES else "custom plugin"
    print(
        f"registered {args.name!r} ({known}) ego={session.info.ego_actor_id} "
        f"dt={session.info.dt} map={session.info.map_name!r}"
    )
    deadline = None if args.duration is None else time.monotonic() + args.duration
    try:
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        session.close()
        print(f"released {args.name!r}")
    return 0


# -- hil-harness -----------------------------------------------------------------


def harness_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hil-harness",
        description="Measure topic cadence, compare against a reference table, or drive laps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_measure = sub.add_parser("measure", help="record one topic's cadence statistics")
    p_measure.add_argument("--bus", required=True, type=_parse_host_port, help="host:port")
    p_measure.add_argument("--topic", required=True)
    p_measure.add_argument("--samples", type=int, default=None)
    p_measure.add_argument("--duration", type=float, default=None)

    p_compare = sub.add_parser(
        "compare", help="measure every topic in a reference table and judge deviations"
    )
    p_compare.add_argument("--bus", required=True, type=_parse_host_port, help="host:port")
    p_compare.add_argument(
        "--ref", default=None, help="reference table JSON (default: packaged)"
    )
    p_compare.add_argument("--samples", type=int, default=200)
    p_compare.add_argument("--duration", type=float, default=None)

    p_exp = sub.add_parser("experiment", help="drive a lane loop over several scenarios")
    p_exp.add_argument("--map", required=True)
    p_exp.add_argument("--scenarios", nargs="+", required=True)
    p_exp.add_argument("--laps", type=int, default=3)
    p_exp.add_argument("--out-dir", default=None)
    p_exp.add_argument("--dt", type=float, default=0.05)
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--actuation", default="accel_integration")
    p_exp.add_argument(
        "--sensor-types",
        default=None,
        help="sensor type catalog YAML (e.g. a reduced-fidelity catalog for long runs)",
    )
    p_exp.add_argument("--sensor-mounts", default=None)

    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))

    if args.command == "measure":
        return _run_measure(args)
    if args.command == "compare":
        return _run_compare(args)
    return _run_experiment(args)


def _run_measure(args) -> int:
    if args.samples is None and args.duration is None:
        args.samples = 200
    host, port = args.bus
    try:
        client = BusClient(host, port)
    except OSError as exc:
        print(f"cannot reach bus at {host}:{port}: {exc}", file=sys.stderr)
        return 2
    try:
        record = measure_topic(
            client, args.topic, duration_s=args.duration, sample_target=args.samples
        )
    except HarnessError as exc:
        print(f"measurement failed: {exc}", file=sys.stderr)
        return 1
    finally:
        client.close()
    print(json.dumps(record.to_json(), indent=1, sort_keys=True))
    return 0


def _run_compare(args) -> int:
    ref_path = args.ref or packaged_reference_table()
    reference = load_reference_table(ref_path)
    host, port = args.bus
    try:
        client = BusClient(host, port)
    except OSError as exc:
        print(f"cannot reach bus at {host}:{port}: {exc}", file=sys.stderr)
        return 2
    records = []
    try:
        for entry in reference:
            try:
                records.append(
                    measure_topic(
                        client,
                        entry.topic,
                        duration_s=args.duration,
                        sample_target=args.samples,
                    )
                )
            except HarnessError as exc:
                log.warning("no data for %s: %s", entry.topic, exc)
    except BusError as exc:
        print(f"bus error: {exc}", file=sys.stderr)
        return 2
    finally:
        client.close()
    report = compare_report(records, reference)
    print(render_report(report))
    return 0 if report["overall_pass"] else 1


def _run_experiment(args) -> int:
    cfg = ServerConfig(
        map_path=args.map,
        dt=args.dt,
        mode="fast",
        seed=args.seed,
        actuation=args.actuation,
        sensor_types=args.sensor_types,
        sensor_mounts=args.sensor_mounts,
    )
    try:
        report = run_track_experiment(
            cfg, args.scenarios, laps=args.laps, out_dir=args.out_dir
        )
    except (HarnessError, StartupError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 1
    for row in report["scenarios"]:
        print(
            f"{row['scenario']}: laps_completed={row['completed']} ticks={row['ticks']} "
            f"overruns={row['overruns']} cross_track mean {row['cross_track_mean_m']:.3f} m "
            f"max {row['cross_track_max_m']:.3f} m"
        )
    print(f"report: {report['report_path']}")
    return 0
