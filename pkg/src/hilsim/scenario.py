"""Scenario definition and live population control.

A :class:`ScenarioConfig` is a declarative description — static obstacles,
seeded traffic vehicles, spawn sources, despawn sinks, pedestrian flows, and
weather — that round-trips losslessly through versioned JSON.  The
:class:`ScenarioEngine` applies one to a world and keeps it running:

* sources spawn a new traffic vehicle every ``delay_s`` (a blocked spawn
  retries next tick without resetting the cadence timer),
* sinks destroy every non-ego actor inside their radius, each tick,
* pedestrian flows keep up to ``crowd_size`` walkers moving along a
  polyline, respawning finished walkers after ``respawn_delay_s``,
* traffic agents drive their vehicles along lane centerlines at cruise
  speed, choosing successor lanes with a per-agent seeded RNG and halting
  behind any actor within the follow gap on their current lane.

The engine steps inside the world tick (sources/agents/flows before
integration, sink sweeps after), so identical configs and seeds replay to
identical spawn/destroy event logs in fast mode.  External edits must be
posted through the world's command mailbox.
"""
from __future__ import annotations

import bisect
import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose
from .road import nearest_lane, nearest_road_point
from .world import ActorKind, ManagedBy, SpawnBlocked, World

SCHEMA_VERSION = 1
WEATHER_TOPIC = "/scenario/weather"

CRUISE_SPEED = 8.0  # m/s, traffic agent default
FOLLOW_GAP = 8.0  # m, halt if another actor is within this distance ahead
DEFAULT_SINK_RADIUS = 4.0  # m
DEFAULT_WALK_SPEED = 1.4  # m/s

VEHICLE_EXTENT = (2.4, 0.95, 0.75)  # bbox half-lengths
PEDESTRIAN_EXTENT = (0.3, 0.3, 0.9)
PROP_EXTENT = (0.5, 0.5, 0.5)


class ScenarioError(Exception):
    pass


class OutOfRange(ScenarioError):
    pass


class SchemaVersionMismatch(ScenarioError):
    pass


class IoError(ScenarioError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def _xy(value) -> tuple[float, float]:
    x, y = value
    return (float(x), float(y))


# -- configuration types -------------------------------------------------------


@dataclass(frozen=True, slots=True)
class WeatherParams:
    cloudiness: float = 0.0  # 0..100
    precipitation: float = 0.0  # 0..100
    wetness: float = 0.0  # 0..100
    fog_density: float = 0.0  # 0..100
    sun_altitude: float = 45.0  # degrees, -90..90
    sun_azimuth: float = 0.0  # degrees, 0 <= az < 360

    def __post_init__(self):
        for name in ("cloudiness", "precipitation", "wetness", "fog_density"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise OutOfRange(f"{name} must be within [0, 100], got {v}")
        if not (-90.0 <= self.sun_altitude <= 90.0):
            raise OutOfRange(f"sun_altitude must be within [-90, 90], got {self.sun_altitude}")
        if not (0.0 <= self.sun_azimuth < 360.0):
            raise OutOfRange(f"sun_azimuth must be within [0, 360), got {self.sun_azimuth}")

    def to_json(self) -> dict:
        return {
            "cloudiness": self.cloudiness,
            "precipitation": self.precipitation,
            "wetness": self.wetness,
            "fog_density": self.fog_density,
            "sun_altitude": self.sun_altitude,
            "sun_azimuth": self.sun_azimuth,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "WeatherParams":
        return cls(**{k: float(doc[k]) for k in cls.__dataclass_fields__ if k in doc})


@dataclass(frozen=True, slots=True)
class StaticSpec:
    kind: str  # "vehicle" | "prop"
    position: tuple[float, float]

    def __post_init__(self):
        _check(self.kind in ("vehicle", "prop"), f"unknown static kind {self.kind!r}")
        object.__setattr__(self, "position", _xy(self.position))


@dataclass(frozen=True, slots=True)
class TrafficVehicleSpec:
    position: tuple[float, float]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "position", _xy(self.position))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True, slots=True)
class SourceSpec:
    position: tuple[float, float]
    delay_s: float

    def __post_init__(self):
        _check(self.delay_s > 0, f"source delay_s must be > 0, got {self.delay_s}")
        object.__setattr__(self, "position", _xy(self.position))
        object.__setattr__(self, "delay_s", float(self.delay_s))


@dataclass(frozen=True, slots=True)
class SinkSpec:
    position: tuple[float, float]
    radius_m: float = DEFAULT_SINK_RADIUS

    def __post_init__(self):
        _check(self.radius_m > 0, f"sink radius_m must be > 0, got {self.radius_m}")
        object.__setattr__(self, "position", _xy(self.position))
        object.__setattr__(self, "radius_m", float(self.radius_m))


@dataclass(frozen=True, slots=True)
class PedFlowSpec:
    path: tuple[tuple[float, float], ...]  # polyline, >= 2 points
    crowd_size: int
    respawn_delay_s: float
    walk_speed: float = DEFAULT_WALK_SPEED

    def __post_init__(self):
        pts = tuple(_xy(p) for p in self.path)
        _check(len(pts) >= 2, "ped flow path needs >= 2 points")
        _check(int(self.crowd_size) >= 1, f"crowd_size must be >= 1, got {self.crowd_size}")
        _check(self.respawn_delay_s >= 0, "respawn_delay_s must be >= 0")
        _check(self.walk_speed > 0, "walk_speed must be > 0")
        object.__setattr__(self, "path", pts)
        object.__setattr__(self, "crowd_size", int(self.crowd_size))
        object.__setattr__(self, "respawn_delay_s", float(self.respawn_delay_s))
        object.__setattr__(self, "walk_speed", float(self.walk_speed))


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    statics: tuple[StaticSpec, ...] = ()
    traffic_vehicles: tuple[TrafficVehicleSpec, ...] = ()
    sources: tuple[SourceSpec, ...] = ()
    sinks: tuple[SinkSpec, ...] = ()
    ped_flows: tuple[PedFlowSpec, ...] = ()
    weather: WeatherParams = WeatherParams()
    global_seed: int = 0
    ego_start: "tuple[float, float, float] | None" = None  # x, y, yaw override

    def __post_init__(self):
        object.__setattr__(self, "statics", tuple(self.statics))
        object.__setattr__(self, "traffic_vehicles", tuple(self.traffic_vehicles))
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "sinks", tuple(self.sinks))
        object.__setattr__(self, "ped_flows", tuple(self.ped_flows))
        object.__setattr__(self, "global_seed", int(self.global_seed))
        if self.ego_start is not None:
            x, y, yaw = self.ego_start
            object.__setattr__(self, "ego_start", (float(x), float(y), float(yaw)))

    def to_json(self) -> dict:
        extra = (
            {} if self.ego_start is None else {"ego_start": list(self.ego_start)}
        )
        return {
            **extra,
            "version": SCHEMA_VERSION,
            "statics": [{"kind": s.kind, "position": list(s.position)} for s in self.statics],
            "traffic_vehicles": [
                {"position": list(v.position), "seed": v.seed} for v in self.traffic_vehicles
            ],
            "sources": [
                {"position": list(s.position), "delay_s": s.delay_s} for s in self.sources
            ],
            "sinks": [
                {"position": list(s.position), "radius_m": s.radius_m} for s in self.sinks
            ],
            "ped_flows": [
                {
                    "path": [list(p) for p in f.path],
                    "crowd_size": f.crowd_size,
                    "respawn_delay_s": f.respawn_delay_s,
                    "walk_speed": f.walk_speed,
                }
                for f in self.ped_flows
            ],
            "weather": self.weather.to_json(),
            "global_seed": self.global_seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioConfig":
        version = doc.get("version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"scenario schema version {version!r}, expected {SCHEMA_VERSION}"
            )
        try:
            return cls(
                statics=tuple(
                    StaticSpec(kind=s["kind"], position=s["position"])
                    for s in doc.get("statics", [])
                ),
                traffic_vehicles=tuple(
                    TrafficVehicleSpec(position=v["position"], seed=v["seed"])
                    for v in doc.get("traffic_vehicles", [])
                ),
                sources=tuple(
                    SourceSpec(position=s["position"], delay_s=s["delay_s"])
                    for s in doc.get("sources", [])
                ),
                sinks=tuple(
                    SinkSpec(
                        position=s["position"],
                        radius_m=s.get("radius_m", DEFAULT_SINK_RADIUS),
                    )
                    for s in doc.get("sinks", [])
                ),
                ped_flows=tuple(
                    PedFlowSpec(
                        path=tuple(tuple(p) for p in f["path"]),
                        crowd_size=f["crowd_size"],
                        respawn_delay_s=f["respawn_delay_s"],
                        walk_speed=f.get("walk_speed", DEFAULT_WALK_SPEED),
                    )
                    for f in doc.get("ped_flows", [])
                ),
                weather=WeatherParams.from_json(doc.get("weather", {})),
                global_seed=doc.get("global_seed", 0),
                ego_start=(
                    tuple(doc["ego_start"]) if doc.get("ego_start") is not None else None
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed scenario document: {exc}") from exc


def save_scenario(config: ScenarioConfig, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(config.to_json(), fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write scenario {path}: {exc}") from exc


def load_scenario(path) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"scenario {path} is not valid JSON: {exc}") from exc
    return ScenarioConfig.from_json(doc)


# -- placement ----------------------------------------------------------------


def place_static(world: World, spec: StaticSpec) -> int:
    """Spawn a parked vehicle (aligned with the nearest lane tangent) or a prop."""
    x, y = spec.position
    if spec.kind == "vehicle":
        yaw = nearest_road_point(world.road, (x, y)).yaw
        extent = VEHICLE_EXTENT
        kind = ActorKind.VEHICLE
    else:
        yaw = 0.0
        extent = PROP_EXTENT
        kind = ActorKind.STATIC_PROP
    pose = Pose(x, y, extent[2], yaw=yaw)
    return world.spawn_actor(kind, pose, extent, managed_by=ManagedBy.NONE, tag="static")


# -- traffic agents -------------------------------------------------------------


class TrafficAgent:
    """Drives one vehicle along lane centerlines at a fixed cruise speed.

    The agent owns the actor's pose (the world skips integrating it) and
    extends a lane route lazily with its own seeded RNG, so the route it
    drives and the route it reports as a plan are the same choice sequence
    regardless of when either is evaluated.
    """

    def __init__(
        self,
        actor_id: int,
        world: World,
        lane_id: int,
        start_s: float,
        seed: int,
        speed: float = CRUISE_SPEED,
        z_offset: float = VEHICLE_EXTENT[2],
    ):
        self.actor_id = actor_id
        self.world = world
        self.speed = speed
        self.z_offset = z_offset
        self._rng = random.Random(seed)
        self._lanes = [lane_id]
        self._ends = [world.road.lane(lane_id).length]
        self._route_s = min(start_s, self._ends[-1])
        self.dead_end = False

    # route bookkeeping ----------------------------------------------------

    def _extend_to(self, route_s: float) -> None:
        while not self.dead_end and route_s > self._ends[-1] - 1e-9:
            choices = sorted(self.world.road.lane(self._lanes[-1]).successors)
            if not choices:
                self.dead_end = True
                return
            nxt = choices[self._rng.randrange(len(choices))] if len(choices) > 1 else choices[0]
            self._lanes.append(nxt)
            self._ends.append(self._ends[-1] + self.world.road.lane(nxt).length)

    def _index_at(self, route_s: float) -> int:
        self._extend_to(route_s)
        route_s = min(route_s, self._ends[-1])
        return min(bisect.bisect_right(self._ends, route_s), len(self._lanes) - 1)

    def _locate(self, route_s: float) -> Pose:
        i = self._index_at(route_s)
        base = 0.0 if i == 0 else self._ends[i - 1]
        route_s = min(route_s, self._ends[-1])
        return self.world.road.lane(self._lanes[i]).pose_at(route_s - base)

    @property
    def current_lane(self) -> int:
        return self._lanes[self._index_at(self._route_s)]

    # behavior ---------------------------------------------------------------

    def _blocked(self) -> bool:
        i = self._index_at(self._route_s)
        my_lane = self._lanes[i]
        lane = self.world.road.lane(my_lane)
        base = 0.0 if i == 0 else self._ends[i - 1]
        my_s = self._route_s - base
        for other in self.world.actors.values():
            if other.actor_id == self.actor_id:
                continue
            lane_id, s = nearest_lane(self.world.road, other.pose.position)
            if lane_id != my_lane or not (my_s < s <= my_s + FOLLOW_GAP):
                continue
            foot = lane.pose_at(s)
            lateral = math.hypot(other.pose.x - foot.x, other.pose.y - foot.y)
            if lateral <= lane.width / 2:
                return True
        return False

    def step(self, dt: float) -> bool:
        """Advance one tick; returns False when the actor no longer exists."""
        actor = self.world.actors.get(self.actor_id)
        if actor is None:
            return False
        v = 0.0 if self._blocked() else self.speed
        if v > 0.0:
            self._route_s += v * dt
        pose = self._locate(self._route_s)
        if self.dead_end and self._route_s >= self._ends[-1] - 1e-9:
            self._route_s = self._ends[-1]
            v = 0.0
        actor.pose = Pose(pose.x, pose.y, pose.z + self.z_offset, yaw=pose.yaw)
        actor.velocity = np.array(
            [v * math.cos(pose.yaw), v * math.sin(pose.yaw), 0.0]
        )
        actor.yaw_rate = 0.0
        return True

    # plan disclosure (see groundtruth.PlanProvider) -------------------------

    def predicted_poses(
        self, start_time: float, horizon_s: float, resolution_s: float
    ) -> list[tuple[float, Pose]]:
        steps = int(round(horizon_s / resolution_s))
        out = []
        for k in range(steps + 1):
            pose = self._locate(self._route_s + self.speed * k * resolution_s)
            out.append(
                (
                    start_time + k * resolution_s,
                    Pose(pose.x, pose.y, pose.z + self.z_offset, yaw=pose.yaw),
                )
            )
        return out


# -- engine ----------------------------------------------------------------------


@dataclass
class _SourceState:
    spec: SourceSpec
    last_spawn: float = 0.0
    spawned: int = 0
    blocked: int = 0


@dataclass
class _Walker:
    actor_id: int
    progress: float = 0.0


@dataclass
class _FlowState:
    spec: PedFlowSpec
    points: np.ndarray = field(init=False)
    cum_s: np.ndarray = field(init=False)
    walkers: list[_Walker] = field(default_factory=list)
    last_spawn: float = -math.inf
    spawned: int = 0

    def __post_init__(self):
        pts = np.array([[x, y, 0.0] for x, y in self.spec.path], dtype=float)
        seg = np.diff(pts, axis=0)
        self.points = pts
        self.cum_s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def pose_at(self, s: float) -> Pose:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum_s, s, side="right") - 1)
        i = min(i, len(self.cum_s) - 2)
        seg_len = self.cum_s[i + 1] - self.cum_s[i]
        t = 0.0 if seg_len == 0 else (s - self.cum_s[i]) / seg_len
        p = self.points[i] + t * (self.points[i + 1] - self.points[i])
        d = self.points[i + 1] - self.points[i]
        return Pose(p[0], p[1], p[2], yaw=math.atan2(d[1], d[0]))


class ScenarioEngine:
    """Runs one scenario against a world.

    Construction spawns the declared statics and traffic vehicles (so it
    must happen on the world thread, before or between ticks);
    :meth:`attach` registers the per-tick hooks.  Later edits must arrive
    through the world mailbox, e.g. ``world.post(lambda w: engine.add_source(...))``.
    """

    def __init__(self, config: ScenarioConfig, world: World, bus=None):
        self.world = world
        self.global_seed = config.global_seed
        self.weather = config.weather
        self.ego_start = config.ego_start
        self.agents: dict[int, TrafficAgent] = {}
        self._statics = list(config.statics)
        self._static_ids: list[int] = []
        self._traffic_specs = list(config.traffic_vehicles)
        self._sources = [_SourceState(spec=s) for s in config.sources]
        self._sinks = list(config.sinks)
        self._flows = [_FlowState(spec=f) for f in config.ped_flows]
        self._weather_pub = None
        self._last_weather_pub = -math.inf
        self.weather_republish_s = 1.0
        if bus is not None:
            from .bus import Reliability, TopicSpec

            self._weather_pub = bus.advertise(
                TopicSpec(WEATHER_TOPIC, Reliability.RELIABLE, 4, latched=True)
            )
        for spec in self._statics:
            self._static_ids.append(place_static(world, spec))
        for spec in self._traffic_specs:
            self._spawn_agent_vehicle(spec.position, spec.seed, tag="traffic")

    # -- wiring -------------------------------------------------------------

    def attach(self) -> None:
        self.world.tick_hooks.append(self.step)
        self.world.post_tick_hooks.append(self.sink_sweep)

    def detach(self) -> None:
        for hooks, fn in (
            (self.world.tick_hooks, self.step),
            (self.world.post_tick_hooks, self.sink_sweep),
        ):
            try:
                hooks.remove(fn)
            except ValueError:
                pass

    def current_config(self) -> ScenarioConfig:
        """The live configuration, as it would be saved right now."""
        return ScenarioConfig(
            statics=tuple(self._statics),
            traffic_vehicles=tuple(self._traffic_specs),
            sources=tuple(s.spec for s in self._sources),
            sinks=tuple(self._sinks),
            ped_flows=tuple(f.spec for f in self._flows),
            weather=self.weather,
            global_seed=self.global_seed,
            ego_start=self.ego_start,
        )

    # -- runtime edits (call on the world thread / via the mailbox) ----------

    def add_static(self, spec: StaticSpec) -> int:
        actor_id = place_static(self.world, spec)
        self._statics.append(spec)
        self._static_ids.append(actor_id)
        return actor_id

    def add_traffic_vehicle(self, spec: TrafficVehicleSpec) -> int:
        actor_id = self._spawn_agent_vehicle(spec.position, spec.seed, tag="traffic")
        self._traffic_specs.append(spec)
        return actor_id

    def add_source(self, spec: SourceSpec) -> None:
        self._sources.append(
            _SourceState(spec=spec, last_spawn=self.world.clock.sim_time)
        )

    def add_sink(self, spec: SinkSpec) -> None:
        self._sinks.append(spec)

    def add_ped_flow(self, spec: PedFlowSpec) -> None:
        self._flows.append(_FlowState(spec=spec))

    def set_weather(self, weather: WeatherParams) -> None:
        if not isinstance(weather, WeatherParams):
            weather = WeatherParams.from_json(weather)
        self.weather = weather
        self._publish_weather()

    def _pop_checked(self, items: list, index: int, what: str):
        if not 0 <= index < len(items):
            raise OutOfRange(f"{what} index {index} out of range (have {len(items)})")
        return items.pop(index)

    def remove_static(self, index: int) -> None:
        """Drop the static by list position, destroying its actor if alive."""
        self._pop_checked(self._statics, index, "static")
        actor_id = self._static_ids.pop(index)
        if actor_id in self.world.actors:
            self.world.destroy_actor(actor_id, tag="scenario_edit")

    def remove_source(self, index: int) -> None:
        self._pop_checked(self._sources, index, "source")

    def remove_sink(self, index: int) -> None:
        self._pop_checked(self._sinks, index, "sink")

    def remove_flow(self, index: int) -> None:
        """Drop the flow by list position, destroying its walkers."""
        flow = self._pop_checked(self._flows, index, "flow")
        for walker in flow.walkers:
            if walker.actor_id in self.world.actors:
                self.world.destroy_actor(walker.actor_id, tag="scenario_edit")

    # -- per-tick stepping -----------------------------------------------------

    def step(self, world: World) -> None:
        """Pre-integration hook: sources, agents, flows, weather cadence."""
        t = world.clock.sim_time
        dt = world.clock.dt

        for i, src in enumerate(self._sources):
            if t - src.last_spawn >= src.spec.delay_s - 1e-9:
                seed = int(
                    np.random.SeedSequence(
                        entropy=self.global_seed, spawn_key=(i, src.spawned)
                    ).generate_state(1)[0]
                )
                try:
                    self._spawn_agent_vehicle(src.spec.position, seed, tag="source")
                except SpawnBlocked:
                    src.blocked += 1
                else:
                    src.last_spawn = t
                    src.spawned += 1

        for actor_id, agent in list(self.agents.items()):
            if not agent.step(dt):
                del self.agents[actor_id]

        for flow in self._flows:
            self._step_flow(flow, t, dt)

        if (
            self._weather_pub is not None
            and t - self._last_weather_pub >= self.weather_republish_s - 1e-9
        ):
            self._publish_weather()

    def sink_sweep(self, world: World) -> None:
        """Post-integration hook: clear every sink radius (the ego is immune)."""
        for sink in self._sinks:
            sx, sy = sink.position
            for actor in list(world.actors.values()):
                if actor.kind is ActorKind.EGO_VEHICLE:
                    continue
                if math.hypot(actor.pose.x - sx, actor.pose.y - sy) <= sink.radius_m:
                    self._forget(actor.actor_id)
                    world.destroy_actor(actor.actor_id, tag="sink")

    # -- internals -----------------------------------------------------------

    def _spawn_agent_vehicle(self, position, seed: int, tag: str) -> int:
        lane_id, s = nearest_lane(self.world.road, position)
        pose = self.world.road.lane(lane_id).pose_at(s)
        spawn_pose = Pose(pose.x, pose.y, pose.z + VEHICLE_EXTENT[2], yaw=pose.yaw)
        actor_id = self.world.spawn_actor(
            ActorKind.VEHICLE,
            spawn_pose,
            VEHICLE_EXTENT,
            managed_by=ManagedBy.TRAFFIC_AGENT,
            tag=tag,
        )
        self.agents[actor_id] = TrafficAgent(actor_id, self.world, lane_id, s, seed)
        return actor_id

    def _step_flow(self, flow: _FlowState, t: float, dt: float) -> None:
        finished: list[_Walker] = []
        for walker in flow.walkers:
            walker.progress += flow.spec.walk_speed * dt
            actor = self.world.actors.get(walker.actor_id)
            if actor is None:
                finished.append(walker)
                continue
            if walker.progress >= flow.length - 1e-9:
                self.world.destroy_actor(walker.actor_id, tag="flow")
                finished.append(walker)
                continue
            pose = flow.pose_at(walker.progress)
            actor.pose = Pose(
                pose.x, pose.y, pose.z + PEDESTRIAN_EXTENT[2], yaw=pose.yaw
            )
            actor.velocity = np.array(
                [
                    flow.spec.walk_speed * math.cos(pose.yaw),
                    flow.spec.walk_speed * math.sin(pose.yaw),
                    0.0,
                ]
            )
        for walker in finished:
            flow.walkers.remove(walker)

        if (
            len(flow.walkers) < flow.spec.crowd_size
            and t - flow.last_spawn >= flow.spec.respawn_delay_s - 1e-9
        ):
            pose = flow.pose_at(0.0)
            try:
                actor_id = self.world.spawn_actor(
                    ActorKind.PEDESTRIAN,
                    Pose(pose.x, pose.y, pose.z + PEDESTRIAN_EXTENT[2], yaw=pose.yaw),
                    PEDESTRIAN_EXTENT,
                    managed_by=ManagedBy.TRAFFIC_AGENT,
                    tag="flow",
                )
            except SpawnBlocked:
                pass
            else:
                flow.walkers.append(_Walker(actor_id=actor_id))
                flow.last_spawn = t
                flow.spawned += 1

    def _forget(self, actor_id: int) -> None:
        self.agents.pop(actor_id, None)
        for flow in self._flows:
            flow.walkers = [w for w in flow.walkers if w.actor_id != actor_id]

    def _publish_weather(self) -> None:
        t = self.world.clock.sim_time
        self._last_weather_pub = t
        if self._weather_pub is not None:
            payload = json.dumps(self.weather.to_json()).encode()
            self._weather_pub.publish(t, payload)

    # -- introspection ---------------------------------------------------------

    def source_stats(self) -> list[dict]:
        return [
            {"spawned": s.spawned, "blocked": s.blocked, "delay_s": s.spec.delay_s}
            for s in self._sources
        ]

    def walker_count(self) -> int:
        return sum(len(f.walkers) for f in self._flows)
