"""The simulation server: one process owning the world and its tick loop.

Startup builds the world from a road-network file, spawns the ego vehicle at
the map's start pose (the first lane's first centerline point, unless the
scenario file overrides it), starts the configured services, and — when
listen addresses are given — opens the TCP bus and the control WebSocket so
external processes can attach.  The tick loop is the single writer of world
state; everything else reaches it through the bus, the control channel, or
the world's command mailbox.

``/clock`` is published exactly once per tick, stamped with the new sim
time, so attached processes can follow simulated time in any tick mode.
"""
from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .bus import Bus, Reliability, TopicSpec
from .control import ControlHub, ControlServer, SessionInfo
from .geom import Pose
from .road import RoadNetwork
from .scenario import VEHICLE_EXTENT, load_scenario
from .sensors import packaged_config_paths
from .services import FIVE_SERVICES, ServiceHost
from .tcpbus import BusServer
from .world import ActorKind, ManagedBy, Snapshot, TickMode, World

log = logging.getLogger(__name__)

CLOCK_TOPIC = "/clock"
_CLOCK = struct.Struct("<d")  # sim time, seconds


class StartupError(Exception):
    """Server could not come up; the message names the failing piece."""


@dataclass
class ServerConfig:
    map_path: str
    dt: float = 0.05
    mode: str = "realtime"
    seed: int = 0
    sensor_types: Optional[str] = None  # None -> packaged full kit
    sensor_mounts: Optional[str] = None
    actuation: str = "accel_integration"
    bus_listen: Optional[str] = None  # "host:port", None -> in-process only
    control_listen: Optional[str] = None
    scenario: Optional[str] = None
    services: tuple[str, ...] = FIVE_SERVICES
    map_grid_step: float = 0.5
    map_output: Optional[str] = None


def _parse_listen(addr: str, what: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host:
        raise StartupError(f"{what} address {addr!r} must look like host:port")
    try:
        return host, int(port)
    except ValueError as exc:
        raise StartupError(f"{what} address {addr!r} has a bad port") from exc


class HiLServer:
    """World, bus, services, and transports for one simulation run."""

    def __init__(self, config: ServerConfig):
        if not os.path.isfile(config.map_path):
            raise StartupError(f"map file not found: {config.map_path}")
        for label, path in (
            ("sensor types file", config.sensor_types),
            ("sensor mounts file", config.sensor_mounts),
            ("scenario file", config.scenario),
        ):
            if path is not None and not os.path.isfile(path):
                raise StartupError(f"{label} not found: {path}")
        try:
            mode = TickMode.parse(config.mode)
        except ValueError as exc:
            raise StartupError(str(exc)) from exc

        types_path, mounts_path = packaged_config_paths()
        self.config = config
        if config.sensor_types is None:
            config.sensor_types = types_path
        if config.sensor_mounts is None:
            config.sensor_mounts = mounts_path

        self.road = RoadNetwork.load(config.map_path)
        self.world = World(self.road, dt=config.dt, mode=mode, seed=config.seed)
        self.bus = Bus()
        self.after_tick: list[Callable[[Snapshot], None]] = []
        self.ego_id = self.world.spawn_actor(
            ActorKind.EGO_VEHICLE,
            self._start_pose(),
            VEHICLE_EXTENT,
            managed_by=ManagedBy.NONE,
            tag="server",
        )
        self._clock_pub = self.bus.advertise(
            TopicSpec(CLOCK_TOPIC, Reliability.RELIABLE, 10)
        )

        self.hub = ControlHub(self.session)
        self.host = ServiceHost(self)
        self.hub.on_register = self._remote_register
        self.hub.on_stopped = self._remote_stopped

        self.bus_server: Optional[BusServer] = None
        self.control_server: Optional[ControlServer] = None
        try:
            if config.bus_listen is not None:
                host, port = _parse_listen(config.bus_listen, "bus listen")
                self.bus_server = BusServer(self.bus, host, port)
            if config.control_listen is not None:
                host, port = _parse_listen(config.control_listen, "control listen")
                self.control_server = ControlServer(self.hub, host, port)
        except OSError as exc:
            self.close()
            raise StartupError(f"cannot open listen socket: {exc}") from exc

        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._glyph_due = 0.0
        for name in config.services:
            self.host.run_service(name)

    def _start_pose(self) -> Pose:
        if self.config.scenario is not None:
            override = load_scenario(self.config.scenario).ego_start
            if override is not None:
                x, y, yaw = override
                return Pose(x, y, VEHICLE_EXTENT[2], yaw=yaw)
        if not self.road.lanes:
            raise StartupError("map has no lanes to place the ego on")
        first = self.road.lanes[min(self.road.lanes)]
        p = first.centerline[0]
        return Pose(p[0], p[1], p[2] + VEHICLE_EXTENT[2], yaw=first.pose_at(0.0).yaw)

    # -- session ---------------------------------------------------------------

    def session(self) -> SessionInfo:
        return SessionInfo(
            sim_address=self.bus_server.address if self.bus_server else "inproc",
            ego_actor_id=self.ego_id,
            dt=self.world.clock.dt,
            mode=self.world.clock.mode.value,
            map_name=Path(self.config.map_path).stem,
        )

    # -- remote service lifecycle (runs on socket threads; defer to the tick) ---

    def _remote_register(self, name: str) -> None:
        if name not in FIVE_SERVICES or self.host.service(name) is not None:
            return

        def start(world: World) -> None:
            try:
                self.host.run_service(name, preregistered=True)
            except Exception:
                log.exception("remote-started service %s failed to attach", name)

        self.world.post(start)

    def _remote_stopped(self, name: str) -> None:
        if name not in FIVE_SERVICES:
            return

        def stop(world: World) -> None:
            try:
                self.host.on_remote_stopped(name)
            except Exception:
                log.exception("stop of remote service %s failed", name)

        self.world.post(stop)

    # -- tick loop ---------------------------------------------------------------

    GLYPH_PERIOD = 0.1  # s of sim time between actor-glyph pushes

    def step(self) -> Snapshot:
        """One world tick plus everything the server owes per tick."""
        snap = self.world.tick()
        self._clock_pub.publish(snap.sim_time, _CLOCK.pack(snap.sim_time))
        for callback in list(self.after_tick):
            callback(snap)
        if snap.sim_time >= self._glyph_due and self.hub.wants_glyphs():
            self._glyph_due = snap.sim_time + self.GLYPH_PERIOD
            self.hub.push_glyphs(
                snap.sim_time,
                [
                    {
                        "id": a.actor_id,
                        "kind": a.kind.name.lower(),
                        "x": a.pose.x,
                        "y": a.pose.y,
                        "yaw": a.pose.yaw,
                    }
                    for a in snap.actors
                ],
            )
        self.host.beat()
        self.hub.registry.sweep()
        return snap

    def run(
        self,
        duration_s: Optional[float] = None,
        max_ticks: Optional[int] = None,
    ) -> int:
        """Step until a limit or shutdown; returns the number of ticks run."""
        ticks = 0
        while not self._stop.is_set():
            if max_ticks is not None and ticks >= max_ticks:
                break
            if duration_s is not None and self.world.clock.sim_time >= duration_s:
                break
            self.step()
            ticks += 1
        return ticks

    def run_in_thread(
        self,
        duration_s: Optional[float] = None,
        max_ticks: Optional[int] = None,
    ) -> threading.Thread:
        if self._thread is not None and self._thread.is_alive():
            raise RuntimeError("server tick loop is already running")
        self._thread = threading.Thread(
            target=self.run,
            kwargs={"duration_s": duration_s, "max_ticks": max_ticks},
            name="hil-server",
            daemon=True,
        )
        self._thread.start()
        return self._thread

    def shutdown(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None
        self.close()

    def close(self) -> None:
        host = getattr(self, "host", None)
        if host is not None:
            host.stop_all()
        for server in (
            getattr(self, "control_server", None),
            getattr(self, "bus_server", None),
        ):
            if server is not None:
                server.close()
        self.control_server = None
        self.bus_server = None

    def __enter__(self) -> "HiLServer":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def start_hil_server(cfg: ServerConfig) -> HiLServer:
    """Bring a server up with its tick loop already running."""
    server = HiLServer(cfg)
    server.run_in_thread()
    return server
