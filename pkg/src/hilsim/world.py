"""Fixed-step world: actors, clock modes, and the single-writer tick loop.

The world owns all mutable simulation state.  Exactly one thread may call
:meth:`World.tick`; every other thread interacts through the command mailbox
(drained at tick start) or by reading immutable :class:`Snapshot` values.

Clock modes:

* ``SYNC_REALTIME`` — each tick blocks until the wall-clock deadline
  ``run_start + tick_index*dt``.  A missed deadline is recorded as an
  overrun event and the loop continues immediately; deadlines never shift,
  sim time never drops, and late calls are never buffered.
* ``SYNC_FAST`` — free-running fixed step, as fast as compute allows.
* ``ASYNC`` — the step size is the measured wall time between ticks.
"""
from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .geom import Pose, obb_overlap_2d
from .road import RoadNetwork

log = logging.getLogger("hilsim.world")

DT_MIN = 0.001
DT_MAX = 0.1


class WorldError(Exception):
    pass


class DuplicateEgo(WorldError):
    pass


class SpawnBlocked(WorldError):
    pass


class UnknownActor(WorldError):
    pass


class EgoProtected(WorldError):
    pass


class TickMode(enum.Enum):
    SYNC_REALTIME = "realtime"
    SYNC_FAST = "fast"
    ASYNC = "async"

    @classmethod
    def parse(cls, name: str) -> "TickMode":
        for mode in cls:
            if mode.value == name:
                return mode
        raise ValueError(f"unknown tick mode {name!r}")


class ActorKind(enum.Enum):
    EGO_VEHICLE = 1
    VEHICLE = 2
    PEDESTRIAN = 3
    STATIC_PROP = 4


class ManagedBy(enum.Enum):
    NONE = 0
    TRAFFIC_AGENT = 1
    EXTERNAL = 2


@dataclass
class Actor:
    """Mutable in-world actor record. Pose position is the bbox center."""

    actor_id: int
    kind: ActorKind
    pose: Pose
    velocity: np.ndarray
    acceleration: np.ndarray
    bbox_extent: np.ndarray  # half-lengths (x, y, z), strictly positive
    managed_by: ManagedBy = ManagedBy.NONE
    yaw_rate: float = 0.0


@dataclass(frozen=True, slots=True)
class ActorState:
    """Immutable copy of an actor at a tick boundary."""

    actor_id: int
    kind: ActorKind
    pose: Pose
    velocity: tuple[float, float, float]
    acceleration: tuple[float, float, float]
    bbox_extent: tuple[float, float, float]
    managed_by: ManagedBy
    yaw_rate: float

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass(frozen=True, slots=True)
class Snapshot:
    """Consistent read of the whole world at a tick boundary."""

    sim_time: float
    tick_index: int
    actors: tuple[ActorState, ...]

    def actor(self, actor_id: int) -> ActorState:
        for a in self.actors:
            if a.actor_id == actor_id:
                return a
        raise UnknownActor(f"no actor {actor_id} in snapshot")

    @property
    def ego(self) -> Optional[ActorState]:
        for a in self.actors:
            if a.kind is ActorKind.EGO_VEHICLE:
                return a
        return None


@dataclass(frozen=True, slots=True)
class OverrunEvent:
    tick_index: int
    lateness: float  # seconds past the deadline


@dataclass(frozen=True, slots=True)
class WorldEvent:
    tick_index: int
    kind: str  # "spawn" | "destroy"
    actor_id: int
    actor_kind: ActorKind
    tag: str = ""


@dataclass
class SimClock:
    dt: float
    mode: TickMode
    tick_index: int = 0
    sim_time: float = 0.0


def wait_until(
    deadline: float,
    now_fn=time.perf_counter,
    sleep_fn=time.sleep,
    spin_window: float = 0.001,
) -> float:
    """Sleep until `deadline` on the now_fn clock; spin the final window.

    Returns the (non-negative) lateness on wake.
    """
    while True:
        rem = deadline - now_fn()
        if rem <= 0.0:
            return -rem
        if rem > spin_window:
            sleep_fn(rem - spin_window)
        else:
            while now_fn() < deadline:
                sleep_fn(0.0)
            return 0.0


class World:
    """See module docstring for the threading and clock contract."""

    def __init__(
        self,
        road: RoadNetwork,
        dt: float,
        mode: TickMode,
        seed: int,
        now_fn: Callable[[], float] = time.perf_counter,
        sleep_fn: Callable[[float], None] = time.sleep,
    ):
        if not (DT_MIN <= dt <= DT_MAX):
            raise ValueError(f"dt must be within [{DT_MIN}, {DT_MAX}], got {dt}")
        self.road = road
        self.clock = SimClock(dt=dt, mode=mode)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._now = now_fn
        self._sleep = sleep_fn
        self._run_start: Optional[float] = None
        self._last_wall: Optional[float] = None

        self.actors: dict[int, Actor] = {}
        self._next_id = 1
        self._ego_id: Optional[int] = None
        self.shutting_down = False

        self._mailbox: list[Callable[["World"], None]] = []
        self._mailbox_lock = threading.Lock()
        # hooks run inside the tick, in order, after the mailbox is drained;
        # post_tick_hooks run after integration, just before the snapshot
        # freezes, so they see (and may amend) the state the tick publishes
        self.tick_hooks: list[Callable[["World"], None]] = []
        self.post_tick_hooks: list[Callable[["World"], None]] = []

        self.overruns: list[OverrunEvent] = []
        self.events: list[WorldEvent] = []
        self._snapshot = self._freeze()

    # -- actor management -------------------------------------------------

    @property
    def ego_id(self) -> Optional[int]:
        return self._ego_id

    @property
    def ego(self) -> Actor:
        if self._ego_id is None:
            raise UnknownActor("no ego vehicle spawned")
        return self.actors[self._ego_id]

    def spawn_actor(
        self,
        kind: ActorKind,
        pose: Pose,
        bbox_extent,
        managed_by: ManagedBy = ManagedBy.NONE,
        velocity=(0.0, 0.0, 0.0),
        tag: str = "",
    ) -> int:
        bbox = np.asarray(bbox_extent, dtype=float)
        if not np.all(bbox > 0):
            raise ValueError("bbox_extent must be strictly positive")
        if kind is ActorKind.EGO_VEHICLE and self._ego_id is not None:
            raise DuplicateEgo("an ego vehicle already exists")
        for other in self.actors.values():
            if obb_overlap_2d(
                (pose.x, pose.y),
                pose.yaw,
                (bbox[0], bbox[1]),
                (other.pose.x, other.pose.y),
                other.pose.yaw,
                (other.bbox_extent[0], other.bbox_extent[1]),
            ):
                raise SpawnBlocked(f"footprint overlaps actor {other.actor_id}")
        actor_id = self._next_id
        self._next_id += 1
        self.actors[actor_id] = Actor(
            actor_id=actor_id,
            kind=kind,
            pose=pose,
            velocity=np.asarray(velocity, dtype=float).copy(),
            acceleration=np.zeros(3),
            bbox_extent=bbox,
            managed_by=managed_by,
        )
        if kind is ActorKind.EGO_VEHICLE:
            self._ego_id = actor_id
        self.events.append(WorldEvent(self.clock.tick_index, "spawn", actor_id, kind, tag))
        return actor_id

    def destroy_actor(self, actor_id: int, tag: str = "") -> None:
        if actor_id not in self.actors:
            raise UnknownActor(f"no actor {actor_id}")
        if actor_id == self._ego_id and not self.shutting_down:
            raise EgoProtected("the ego vehicle cannot be destroyed during a run")
        kind = self.actors[actor_id].kind
        del self.actors[actor_id]
        if actor_id == self._ego_id:
            self._ego_id = None
        self.events.append(WorldEvent(self.clock.tick_index, "destroy", actor_id, kind, tag))

    # -- command mailbox ---------------------------------------------------

    def post(self, command: Callable[["World"], None]) -> None:
        """Queue a mutation to be applied at the start of the next tick."""
        with self._mailbox_lock:
            self._mailbox.append(command)

    # -- tick loop ----------------------------------------------------------

    def tick(self) -> Snapshot:
        if self._run_start is None:
            self._run_start = self._now()
            self._last_wall = self._run_start

        with self._mailbox_lock:
            pending, self._mailbox = self._mailbox, []
        for command in pending:
            try:
                command(self)
            except WorldError as exc:
                log.warning("mailbox command failed: %s", exc)

        for hook in list(self.tick_hooks):
            hook(self)

        dt = self.clock.dt
        if self.clock.mode is TickMode.ASYNC:
            now = self._now()
            dt = max(now - self._last_wall, 1e-9)
            self._last_wall = now

        self._integrate(dt)

        self.clock.tick_index += 1
        if self.clock.mode is TickMode.ASYNC:
            self.clock.sim_time += dt
        else:
            # derived, not accumulated: sim_time == tick_index*dt bit-exactly
            self.clock.sim_time = self.clock.tick_index * self.clock.dt

        for hook in list(self.post_tick_hooks):
            hook(self)

        self._snapshot = self._freeze()

        if self.clock.mode is TickMode.SYNC_REALTIME:
            deadline = self._run_start + self.clock.tick_index * self.clock.dt
            now = self._now()
            if now > deadline + 1e-4:
                self.overruns.append(OverrunEvent(self.clock.tick_index, now - deadline))
            else:
                wait_until(deadline, self._now, self._sleep)
        return self._snapshot

    def _integrate(self, dt: float) -> None:
        # semi-implicit Euler; traffic-agent actors are positioned by their
        # agent, and externally managed actors own their velocity (their
        # acceleration field is reporting-only, e.g. the ego's actuator)
        for actor in self.actors.values():
            if actor.managed_by is ManagedBy.TRAFFIC_AGENT:
                continue
            if actor.managed_by is ManagedBy.NONE:
                actor.velocity = actor.velocity + actor.acceleration * dt
            p = actor.pose.position + actor.velocity * dt
            yaw = actor.pose.yaw + actor.yaw_rate * dt
            actor.pose = Pose(p[0], p[1], p[2], actor.pose.roll, actor.pose.pitch, yaw)

    def _freeze(self) -> Snapshot:
        return Snapshot(
            sim_time=self.clock.sim_time,
            tick_index=self.clock.tick_index,
            actors=tuple(
                ActorState(
                    actor_id=a.actor_id,
                    kind=a.kind,
                    pose=a.pose,
                    velocity=tuple(a.velocity),
                    acceleration=tuple(a.acceleration),
                    bbox_extent=tuple(a.bbox_extent),
                    managed_by=a.managed_by,
                    yaw_rate=a.yaw_rate,
                )
                for a in self.actors.values()
            ),
        )

    def snapshot(self) -> Snapshot:
        """Latest tick-boundary snapshot (safe to share across threads)."""
        return self._snapshot


def create_world(
    road: RoadNetwork,
    dt: float,
    mode: TickMode,
    seed: int,
    now_fn: Callable[[], float] = time.perf_counter,
    sleep_fn: Callable[[float], None] = time.sleep,
) -> World:
    return World(road, dt, mode, seed, now_fn=now_fn, sleep_fn=sleep_fn)
