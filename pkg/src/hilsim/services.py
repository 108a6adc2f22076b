"""The five plugin services and the host that runs them in-process.

Each service is a small task bound to a running server: it installs hooks on
the tick (pre-integration work goes on ``world.tick_hooks``, per-snapshot
work on ``server.after_tick``) and registers control-channel handlers for
the ops it owns.  Every hook is guarded — an exception inside one service
stops *that* service and nothing else, so a crashing sensor stack can never
take the vehicle interface down with it (the isolation contract).

:class:`ServiceHost` owns the lifecycle: ``run_service``/``stop_service`` by
name, restart at will, custom plugin names accepted as plain registered
plugins.  Remote processes get the same lifecycle over the control channel —
registering one of the five service names starts its in-process task, and
the task stops when that connection goes away (see ``hil-service``).

``generate_pointcloud_map`` belongs to the map service: it samples the
static scene (ground grid over the inflated road bounds plus prop bounding
boxes) into the same 16-byte XYZI record format the lidar streams use, with
a small header of magic and count so external consumers can read the file.
"""
from __future__ import annotations

import logging
import struct
import threading
from typing import TYPE_CHECKING, Optional

import numpy as np

from .actuation import (
    CONTROL_TOPIC,
    STATUS_TOPICS,
    ActuationError,
    ControlLimits,
    StatusEmitter,
    VehicleActuator,
    decode_command,
    make_longitudinal_mode,
)
from .bus import Reliability, TopicSpec
from .control import NameConflict, SERVICE_NAMES
from .groundtruth import GroundTruthPublisher
from .road import EmptyRoad
from .scenario import (
    PedFlowSpec,
    ScenarioConfig,
    ScenarioEngine,
    SinkSpec,
    SourceSpec,
    StaticSpec,
    load_scenario,
)
from .sensors import build_sensor_kit, load_sensor_config
from .world import ActorKind, World

if TYPE_CHECKING:  # the server duck-types; see server.py
    from .server import HiLServer

log = logging.getLogger(__name__)

FIVE_SERVICES = SERVICE_NAMES

MAP_TOPIC = "/map/pointcloud"
MAP_MAGIC = 0x48494C4D  # "MLIH" little-endian on disk
MAP_INFLATION = 5.0  # meters added around the road bounds
DEFAULT_GRID_STEP = 0.5

_MAP_HEADER = struct.Struct("<II")  # magic, point count
_POINT = struct.Struct("<4f")  # x, y, z, intensity


class ServiceError(Exception):
    pass


class AlreadyRunning(ServiceError):
    pass


class UnknownService(ServiceError):
    pass


class IoError(ServiceError):
    pass


class Service:
    """Base class: guarded hooks, lifecycle, fault injection point."""

    def __init__(self, host: "ServiceHost", name: str):
        self.host = host
        self.server = host.server
        self.name = name
        self.failed: Optional[BaseException] = None
        self._fault_requested = False

    # subclasses install hooks/handlers here
    def attach(self) -> None:
        pass

    def detach(self) -> None:
        pass

    def _guarded(self, fn):
        """Wrap a hook so a crash stops this service instead of the server."""

        def wrapper(*args, **kwargs):
            if self._fault_requested:
                self._fault_requested = False
                self._crash(RuntimeError(f"injected fault in {self.name}"))
                return
            try:
                fn(*args, **kwargs)
            except Exception as exc:
                self._crash(exc)

        return wrapper

    def _crash(self, exc: BaseException) -> None:
        self.failed = exc
        log.error("service %s crashed: %s", self.name, exc)
        self.host._service_crashed(self)


class GenericService(Service):
    """A custom plugin name with no built-in behavior, tracked by the registry."""


def _remove_hook(hooks: list, fn) -> None:
    try:
        hooks.remove(fn)
    except ValueError:
        pass


class VehicleInterfaceService(Service):
    """Applies bus control commands to the ego and streams vehicle status."""

    DEBUG_PERIOD = 0.1  # s of sim time between debug-stream samples

    def attach(self) -> None:
        server = self.server
        limits = ControlLimits()
        mode = make_longitudinal_mode(server.config.actuation, limits)
        self.actuator = VehicleActuator(mode, limits, seed=server.world.seed)
        self.rejected = 0
        self._debug_due = 0.0
        self._status_pubs = {
            topic: server.bus.advertise(TopicSpec(topic, Reliability.RELIABLE, 10))
            for topic in STATUS_TOPICS
        }
        self.emitter = StatusEmitter(
            self.actuator, self._status_pubs, start_time=server.world.clock.sim_time
        )
        self._sub = server.bus.subscribe(CONTROL_TOPIC, Reliability.RELIABLE, 64)
        self._hook = self._guarded(self._on_tick)
        server.world.tick_hooks.append(self._hook)

    def _on_tick(self, world: World) -> None:
        for env in self._sub.drain():
            try:
                self.actuator.submit(decode_command(env.payload))
            except (ActuationError, ValueError) as exc:
                self.rejected += 1
                log.warning("rejected control command: %s", exc)
        self.actuator.on_tick(world)
        self.emitter.on_tick(world)
        hub = self.server.hub
        if world.clock.sim_time >= self._debug_due and hub.wants_debug():
            self._debug_due = world.clock.sim_time + self.DEBUG_PERIOD
            status = self.actuator.status()
            cmd = status.last_command
            hub.push_debug(
                {
                    "t": status.stamp,
                    "steer_cmd": cmd.target_steer if cmd else 0.0,
                    "accel_cmd": cmd.target_accel if cmd else 0.0,
                    "steer_exec": status.steer_angle,
                    "accel_exec": status.accel_applied,
                }
            )

    def detach(self) -> None:
        _remove_hook(self.server.world.tick_hooks, self._hook)
        self._sub.close()


class SensorInterfaceService(Service):
    """Runs the mounted sensor kit and owns the sensor control ops."""

    def attach(self) -> None:
        server = self.server
        specs = load_sensor_config(
            server.config.sensor_types, server.config.sensor_mounts
        )
        self.kit = build_sensor_kit(specs, server.world, server.bus)
        self._cb = self._guarded(self._after_tick)
        server.after_tick.append(self._cb)
        server.hub.set_handler("set_sensor_enabled", self._set_enabled)
        server.hub.set_handler("sensor_list", self._sensor_list)

    def _after_tick(self, snapshot) -> None:
        self.kit.dispatch(snapshot)

    def _set_enabled(self, msg: dict) -> dict:
        mount = msg["mount"]
        enabled = bool(msg["enabled"])
        self.kit.set_enabled(mount, enabled)
        return {
            "v": 1,
            "op": "ok",
            "re": "set_sensor_enabled",
            "mount": mount,
            "enabled": enabled,
        }

    def _sensor_list(self, msg: dict) -> dict:
        sensors = []
        for name in self.kit.mount_names():
            node = self.kit.node(name)
            sensors.append(
                {
                    "mount": name,
                    "type": node.typedef.name,
                    "topic": node.mount.topic,
                    "enabled": self.kit.is_enabled(name),
                }
            )
        return {"v": 1, "op": "sensor_list", "sensors": sensors}

    def detach(self) -> None:
        server = self.server
        _remove_hook(server.after_tick, self._cb)
        server.hub.set_handler("set_sensor_enabled", None)
        server.hub.set_handler("sensor_list", None)
        self.kit.close()


class ScenarioConfiguratorService(Service):
    """Owns the scenario engine and the live-edit control ops."""

    def attach(self) -> None:
        server = self.server
        if server.config.scenario is not None:
            config = load_scenario(server.config.scenario)
        else:
            config = ScenarioConfig(global_seed=server.world.seed)
        self.engine = ScenarioEngine(config, server.world, server.bus)
        self._step = self._guarded(self.engine.step)
        self._sweep = self._guarded(self.engine.sink_sweep)
        server.world.tick_hooks.append(self._step)
        server.world.post_tick_hooks.append(self._sweep)
        server.hub.set_handler("scenario_edit", self._edit)
        server.hub.set_handler("scenario_get", self._get)

    _EDIT_SPECS = {
        "add_static": lambda a: StaticSpec(kind=a["kind"], position=(a["x"], a["y"])),
        "add_source": lambda a: SourceSpec(
            position=(a["x"], a["y"]), delay_s=a["delay_s"]
        ),
        "add_sink": lambda a: SinkSpec(
            position=(a["x"], a["y"]), radius_m=a.get("radius_m", 4.0)
        ),
        "add_flow": lambda a: PedFlowSpec(
            path=tuple((p["x"], p["y"]) for p in a["path"]),
            crowd_size=a["crowd_size"],
            respawn_delay_s=a.get("respawn_delay_s", 0.0),
        ),
    }

    _ADD_METHODS = {
        "add_static": "add_static",
        "add_source": "add_source",
        "add_sink": "add_sink",
        "add_flow": "add_ped_flow",
    }
    _REMOVE_OPS = ("remove_static", "remove_source", "remove_sink", "remove_flow")

    def _edit(self, msg: dict) -> dict:
        applied = []
        calls = []
        for op, args in msg.items():
            if op in ("v", "op"):
                continue
            if op in self._EDIT_SPECS:
                spec = self._EDIT_SPECS[op](args)  # validates now, applies later
                method = getattr(self.engine, self._ADD_METHODS[op])
                calls.append(lambda m=method, s=spec: m(s))
            elif op == "set_weather":
                calls.append(lambda a=args: self.engine.set_weather(a))
            elif op in self._REMOVE_OPS:
                method = getattr(self.engine, op)
                calls.append(lambda m=method, i=int(args["index"]): m(i))
            else:
                raise ValueError(f"unsupported scenario edit {op!r}")
            applied.append(op)
        if not applied:
            raise ValueError("scenario_edit carried no edit op")
        # mutate only between ticks: the world mailbox runs these at the
        # start of the next tick, keeping the tick loop the single writer
        for call in calls:
            self.server.world.post(lambda w, c=call: c())
        return {"v": 1, "op": "ok", "re": "scenario_edit", "applied": applied}

    def _get(self, msg: dict) -> dict:
        return {"v": 1, "op": "scenario", "config": self.engine.current_config().to_json()}

    def detach(self) -> None:
        server = self.server
        _remove_hook(server.world.tick_hooks, self._step)
        _remove_hook(server.world.post_tick_hooks, self._sweep)
        server.hub.set_handler("scenario_edit", None)
        server.hub.set_handler("scenario_get", None)


class GroundtruthPublisherService(Service):
    """Publishes detected/tracked/predicted object streams every tick."""

    def attach(self) -> None:
        server = self.server
        self.publisher = GroundTruthPublisher(
            server.bus, server.world.road, agents=self._agents
        )
        self._cb = self._guarded(self._after_tick)
        server.after_tick.append(self._cb)

    def _agents(self):
        scenario = self.host.service("scenario_configurator_service")
        return scenario.engine.agents if scenario is not None else {}

    def _after_tick(self, snapshot) -> None:
        self.publisher.publish(snapshot)

    def detach(self) -> None:
        _remove_hook(self.server.after_tick, self._cb)


class MapService(Service):
    """Builds the static point-cloud map once and publishes it latched."""

    def attach(self) -> None:
        server = self.server
        self.point_count, blob = pointcloud_map_bytes(
            server.world, server.config.map_grid_step
        )
        self._pub = server.bus.advertise(
            TopicSpec(MAP_TOPIC, Reliability.RELIABLE, 1, latched=True)
        )
        self._pub.publish(server.world.clock.sim_time, blob)
        out_path = server.config.map_output
        if out_path is not None:
            _write_map_file(out_path, blob)


_SERVICE_CLASSES: dict[str, type[Service]] = {
    "vehicle_interface_service": VehicleInterfaceService,
    "sensor_interface_service": SensorInterfaceService,
    "scenario_configurator_service": ScenarioConfiguratorService,
    "groundtruth_publisher_service": GroundtruthPublisherService,
    "map_service": MapService,
}


class ServiceHost:
    """Starts, stops, and isolates service tasks for one server."""

    def __init__(self, server: "HiLServer"):
        self.server = server
        self._lock = threading.RLock()
        self._services: dict[str, Service] = {}

    def run_service(self, name: str, *, preregistered: bool = False) -> Service:
        """Start the named service; unknown names become generic plugins.

        ``preregistered`` skips plugin registration when the name was just
        registered over the control channel (the remote-attach path).
        """
        with self._lock:
            if name in self._services:
                raise AlreadyRunning(f"service {name!r} is already running")
            cls = _SERVICE_CLASSES.get(name, GenericService)
            service = cls(self, name)
            registry = self.server.hub.registry
            if not preregistered:
                try:
                    registry.register(name)
                except NameConflict as exc:
                    raise AlreadyRunning(str(exc)) from exc
            try:
                service.attach()
            except Exception:
                registry.mark_stopped(name)
                raise
            registry.mark_running(name)
            self._services[name] = service
            return service

    def stop_service(self, name: str) -> None:
        with self._lock:
            service = self._services.pop(name, None)
            if service is None:
                raise UnknownService(f"service {name!r} is not running")
            service.detach()
            self.server.hub.registry.mark_stopped(name)

    def service(self, name: str) -> Optional[Service]:
        with self._lock:
            return self._services.get(name)

    def running(self) -> list[str]:
        with self._lock:
            return sorted(self._services)

    def inject_fault(self, name: str) -> None:
        """Make the named service's next hook invocation crash (fault testing)."""
        with self._lock:
            service = self._services.get(name)
            if service is None:
                raise UnknownService(f"service {name!r} is not running")
            service._fault_requested = True

    def beat(self) -> None:
        """Heartbeat on behalf of in-process tasks (no socket to miss)."""
        registry = self.server.hub.registry
        with self._lock:
            names = list(self._services)
        for name in names:
            try:
                registry.heartbeat(name)
            except Exception:
                pass

    def stop_all(self) -> None:
        for name in self.running():
            try:
                self.stop_service(name)
            except UnknownService:
                pass

    def _service_crashed(self, service: Service) -> None:
        with self._lock:
            if self._services.get(service.name) is not service:
                return
            del self._services[service.name]
            try:
                service.detach()
            except Exception:
                log.exception("detach of crashed service %s failed", service.name)
            self.server.hub.registry.mark_stopped(service.name)

    # -- control-channel lifecycle (installed on the hub by the server) -------

    def on_remote_register(self, name: str) -> None:
        if name in _SERVICE_CLASSES and self.service(name) is None:
            self.run_service(name, preregistered=True)

    def on_remote_stopped(self, name: str) -> None:
        if name in _SERVICE_CLASSES and self.service(name) is not None:
            try:
                self.stop_service(name)
            except UnknownService:
                pass


# -- point-cloud map --------------------------------------------------------


def pointcloud_map_bytes(
    world: World,
    grid_step: float = DEFAULT_GRID_STEP,
    inflation: float = MAP_INFLATION,
) -> tuple[int, bytes]:
    """Sample the static scene into header + XYZI records; returns (count, blob)."""
    if grid_step <= 0:
        raise ValueError(f"grid_step must be > 0, got {grid_step}")
    points: list[tuple[float, float, float, float]] = []
    try:
        min_x, min_y, max_x, max_y = world.road.bounds()
    except EmptyRoad:
        pass
    else:
        min_x -= inflation
        min_y -= inflation
        max_x += inflation
        max_y += inflation
        xs = min_x + grid_step * np.arange(int((max_x - min_x) / grid_step + 1e-9) + 1)
        ys = min_y + grid_step * np.arange(int((max_y - min_y) / grid_step + 1e-9) + 1)
        gx, gy = np.meshgrid(xs, ys)
        for x, y in zip(gx.ravel(), gy.ravel()):
            points.append((float(x), float(y), 0.0, 0.0))
    for actor in world.actors.values():
        if actor.kind is not ActorKind.STATIC_PROP:
            continue
        cx, cy, cz = actor.pose.x, actor.pose.y, actor.pose.z
        ex, ey, ez = actor.bbox_extent
        for sx in (-1.0, 1.0):
            for sy in (-1.0, 1.0):
                for sz in (-1.0, 1.0):
                    points.append((cx + sx * ex, cy + sy * ey, cz + sz * ez, 1.0))
    blob = bytearray(_MAP_HEADER.pack(MAP_MAGIC, len(points)))
    for p in points:
        blob += _POINT.pack(*p)
    return len(points), bytes(blob)


def _write_map_file(out_path, blob: bytes) -> None:
    try:
        with open(out_path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write point-cloud map {out_path}: {exc}") from exc


def generate_pointcloud_map(
    world: World,
    grid_step: float,
    out_path,
    inflation: float = MAP_INFLATION,
) -> int:
    """Write the static scene's point-cloud file; returns the point count."""
    count, blob = pointcloud_map_bytes(world, grid_step, inflation)
    _write_map_file(out_path, blob)
    return count


def read_pointcloud_map(path) -> np.ndarray:
    """Read a map file back as an (N, 4) float array (x, y, z, intensity)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read point-cloud map {path}: {exc}") from exc
    if len(blob) < _MAP_HEADER.size:
        raise ValueError("truncated point-cloud map header")
    magic, count = _MAP_HEADER.unpack_from(blob)
    if magic != MAP_MAGIC:
        raise ValueError(f"bad point-cloud map magic {magic:#x}")
    body = blob[_MAP_HEADER.size :]
    if len(body) != count * _POINT.size:
        raise ValueError("point-cloud map length does not match its count")
    return np.frombuffer(body, dtype="<f4").reshape(count, 4).astype(float)
