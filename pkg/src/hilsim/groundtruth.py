"""Ground-truth object streams: detections, tracks, and predictions.

Stand-ins for a perception stack that read the world state directly:

* every non-ego actor becomes one :class:`DetectedObject` per tick,
* a bounded per-actor history ring yields :class:`TrackedObject` records,
* short-horizon :class:`PredictedObject` paths come from a traffic agent's
  own plan when one manages the actor, from lane-graph waypoints for moving
  unmanaged vehicles, and from straight-line continuation otherwise.

All three streams serialize to little-endian, length-prefixed binary
records (see :func:`encode_detected` and friends), so readers can skip
records they do not understand.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Protocol

from .geom import Pose
from .road import RoadNetwork, nearest_lane, route_waypoints
from .world import ActorKind, ActorState, Snapshot

DETECTED_TOPIC = "/groundtruth/detected_objects"
TRACKED_TOPIC = "/groundtruth/tracked_objects"
PREDICTED_TOPIC = "/groundtruth/predicted_objects"

DEFAULT_BUFFER_S = 2.0
DEFAULT_HORIZON_S = 8.0
DEFAULT_RESOLUTION_S = 0.5

# below this speed an object is predicted to stay where it is
STATIONARY_SPEED = 0.01


class GroundTruthError(Exception):
    pass


class NonMonotoneStamp(GroundTruthError):
    pass


class ObjectClass(enum.Enum):
    CAR = 1
    PEDESTRIAN = 2
    PROP = 3


_CLASS_BY_KIND = {
    ActorKind.EGO_VEHICLE: ObjectClass.CAR,
    ActorKind.VEHICLE: ObjectClass.CAR,
    ActorKind.PEDESTRIAN: ObjectClass.PEDESTRIAN,
    ActorKind.STATIC_PROP: ObjectClass.PROP,
}


class PathSource(enum.Enum):
    AGENT_PLAN = 1
    ROAD_WAYPOINTS = 2
    STRAIGHT_LINE = 3


class PlanProvider(Protocol):
    """Anything that can reveal its own intended future poses."""

    def predicted_poses(
        self, start_time: float, horizon_s: float, resolution_s: float
    ) -> list[tuple[float, Pose]]: ...


@dataclass(frozen=True, slots=True)
class DetectedObject:
    actor_id: int
    object_class: ObjectClass
    pose: Pose  # bbox center
    extent: tuple[float, float, float]  # half-lengths
    velocity: tuple[float, float, float]
    stamp: float


@dataclass(frozen=True, slots=True)
class TrackPoint:
    stamp: float
    pose: Pose
    velocity: tuple[float, float, float]


@dataclass(frozen=True, slots=True)
class TrackedObject:
    actor_id: int
    object_class: ObjectClass
    history: tuple[TrackPoint, ...]  # oldest first, newest last

    @property
    def span(self) -> float:
        return self.history[-1].stamp - self.history[0].stamp


@dataclass(frozen=True, slots=True)
class PredictedObject:
    actor_id: int
    object_class: ObjectClass
    source: PathSource
    path: tuple[tuple[float, Pose], ...]  # (stamp, pose), never empty


def object_class_of(kind: ActorKind) -> ObjectClass:
    return _CLASS_BY_KIND[kind]


# -- detections --------------------------------------------------------------


def detected_objects(snapshot: Snapshot) -> list[DetectedObject]:
    """One detection per non-ego actor, ordered by actor id."""
    out = [
        DetectedObject(
            actor_id=a.actor_id,
            object_class=object_class_of(a.kind),
            pose=a.pose,
            extent=a.bbox_extent,
            velocity=a.velocity,
            stamp=snapshot.sim_time,
        )
        for a in snapshot.actors
        if a.kind is not ActorKind.EGO_VEHICLE
    ]
    out.sort(key=lambda d: d.actor_id)
    return out


# -- tracks ------------------------------------------------------------------


class Tracker:
    """Bounded history of pose/velocity per actor.

    Snapshots must arrive in strictly increasing stamp order.  Entries older
    than ``buffer_s`` relative to the newest stamp are evicted; an actor that
    leaves the world keeps its remaining history until it ages out the same
    way (one full buffer span of grace), then its track is dropped.
    """

    def __init__(self, buffer_s: float = DEFAULT_BUFFER_S):
        if not buffer_s > 0:
            raise ValueError("buffer_s must be > 0")
        self.buffer_s = buffer_s
        self._last_stamp: Optional[float] = None
        self._history: dict[int, list[TrackPoint]] = {}
        self._classes: dict[int, ObjectClass] = {}

    def update(self, snapshot: Snapshot) -> list[TrackedObject]:
        t = snapshot.sim_time
        if self._last_stamp is not None and t <= self._last_stamp:
            raise NonMonotoneStamp(
                f"stamp {t} is not after previous stamp {self._last_stamp}"
            )
        self._last_stamp = t

        for a in snapshot.actors:
            self._history.setdefault(a.actor_id, []).append(
                TrackPoint(stamp=t, pose=a.pose, velocity=a.velocity)
            )
            self._classes[a.actor_id] = object_class_of(a.kind)

        horizon = t - self.buffer_s + 1e-9
        for actor_id in list(self._history):
            ring = self._history[actor_id]
            keep = 0
            while keep < len(ring) and ring[keep].stamp <= horizon:
                keep += 1
            if keep:
                del ring[:keep]
            if not ring:
                del self._history[actor_id]
                del self._classes[actor_id]

        return self.tracks()

    def tracks(self) -> list[TrackedObject]:
        return [
            TrackedObject(
                actor_id=actor_id,
                object_class=self._classes[actor_id],
                history=tuple(ring),
            )
            for actor_id, ring in sorted(self._history.items())
        ]


# -- predictions -------------------------------------------------------------


def _straight_line_path(
    actor: ActorState, t0: float, horizon_s: float, resolution_s: float
) -> tuple[tuple[float, Pose], ...]:
    v = actor.velocity
    speed = actor.speed
    if speed < STATIONARY_SPEED:
        return ((t0, actor.pose),)
    yaw = math.atan2(v[1], v[0])
    p = actor.pose
    steps = int(round(horizon_s / resolution_s))
    return tuple(
        (
            t0 + k * resolution_s,
            Pose(
                p.x + v[0] * k * resolution_s,
                p.y + v[1] * k * resolution_s,
                p.z + v[2] * k * resolution_s,
                roll=p.roll,
                pitch=p.pitch,
                yaw=yaw,
            ),
        )
        for k in range(steps + 1)
    )


def _lane_following_path(
    actor: ActorState,
    road: RoadNetwork,
    t0: float,
    horizon_s: float,
    resolution_s: float,
) -> tuple[tuple[float, Pose], ...]:
    speed = actor.speed
    lane_id, s = nearest_lane(road, actor.pose.position)
    spacing = speed * resolution_s
    poses = route_waypoints(
        road,
        lane_id,
        spacing=spacing,
        horizon=speed * horizon_s,
        seed=actor.actor_id,
        start_s=s,
    )
    return tuple((t0 + k * resolution_s, pose) for k, pose in enumerate(poses))


def predicted_objects(
    snapshot: Snapshot,
    road: RoadNetwork,
    agents: Optional[Mapping[int, PlanProvider]] = None,
    *,
    horizon_s: float = DEFAULT_HORIZON_S,
    resolution_s: float = DEFAULT_RESOLUTION_S,
) -> list[PredictedObject]:
    """Short-horizon paths for every non-ego actor.

    Actors managed by a plan-revealing agent get that plan (truncated to the
    horizon); moving unmanaged vehicles follow lane-graph waypoints at their
    current speed; everything else — pedestrians, props, stationary
    vehicles — continues on a straight line (a single pose when stationary).
    """
    if not resolution_s > 0:
        raise ValueError("resolution_s must be > 0")
    if not horizon_s > 0:
        raise ValueError("horizon_s must be > 0")
    agents = agents or {}
    t0 = snapshot.sim_time
    out: list[PredictedObject] = []
    for actor in snapshot.actors:
        if actor.kind is ActorKind.EGO_VEHICLE:
            continue
        provider = agents.get(actor.actor_id)
        if provider is not None:
            plan = provider.predicted_poses(t0, horizon_s, resolution_s)
            path = tuple(
                (stamp, pose) for stamp, pose in plan if stamp <= t0 + horizon_s + 1e-9
            )
            source = PathSource.AGENT_PLAN
        elif actor.kind is ActorKind.VEHICLE and actor.speed >= STATIONARY_SPEED:
            path = _lane_following_path(actor, road, t0, horizon_s, resolution_s)
            source = PathSource.ROAD_WAYPOINTS
        else:
            path = _straight_line_path(actor, t0, horizon_s, resolution_s)
            source = PathSource.STRAIGHT_LINE
        if not path:
            path = ((t0, actor.pose),)
        out.append(
            PredictedObject(
                actor_id=actor.actor_id,
                object_class=object_class_of(actor.kind),
                source=source,
                path=path,
            )
        )
    out.sort(key=lambda p: p.actor_id)
    return out


# -- wire encodings ----------------------------------------------------------
#
# Every stream payload is:  header '<dI' (stamp, record count), then per
# record a '<I' byte-length prefix followed by that many bytes.  All values
# little-endian; poses are 6 doubles (x, y, z, roll, pitch, yaw).

_STREAM_HEADER = struct.Struct("<dI")
_RECORD_LEN = struct.Struct("<I")
_POSE = struct.Struct("<6d")
_VEC3 = struct.Struct("<3d")

_DETECTED_FIXED = struct.Struct("<IBd")  # actor_id, class, stamp
_TRACKED_FIXED = struct.Struct("<IBI")  # actor_id, class, point count
_TRACK_POINT = struct.Struct("<d6d3d")  # stamp, pose, velocity
_PREDICTED_FIXED = struct.Struct("<IBBI")  # actor_id, class, source, count
_PATH_POINT = struct.Struct("<d6d")  # stamp, pose


def _pack_pose(pose: Pose) -> bytes:
    return _POSE.pack(pose.x, pose.y, pose.z, pose.roll, pose.pitch, pose.yaw)


def _unpack_pose(buf: bytes, offset: int) -> Pose:
    return Pose(*_POSE.unpack_from(buf, offset))


def _frame(stamp: float, records: Iterable[bytes]) -> bytes:
    chunks = list(records)
    body = b"".join(_RECORD_LEN.pack(len(r)) + r for r in chunks)
    return _STREAM_HEADER.pack(stamp, len(chunks)) + body


def _records(payload: bytes) -> tuple[float, list[bytes]]:
    if len(payload) < _STREAM_HEADER.size:
        raise ValueError("payload shorter than stream header")
    stamp, count = _STREAM_HEADER.unpack_from(payload, 0)
    off = _STREAM_HEADER.size
    records = []
    for _ in range(count):
        (n,) = _RECORD_LEN.unpack_from(payload, off)
        off += _RECORD_LEN.size
        records.append(payload[off : off + n])
        if len(records[-1]) != n:
            raise ValueError("truncated record")
        off += n
    if off != len(payload):
        raise ValueError(f"{len(payload) - off} trailing bytes")
    return stamp, records


def encode_detected(stamp: float, objects: Iterable[DetectedObject]) -> bytes:
    records = [
        _DETECTED_FIXED.pack(o.actor_id, o.object_class.value, o.stamp)
        + _pack_pose(o.pose)
        + _VEC3.pack(*o.extent)
        + _VEC3.pack(*o.velocity)
        for o in objects
    ]
    return _frame(stamp, records)


def decode_detected(payload: bytes) -> tuple[float, list[DetectedObject]]:
    stamp, records = _records(payload)
    out = []
    for rec in records:
        actor_id, cls, obj_stamp = _DETECTED_FIXED.unpack_from(rec, 0)
        off = _DETECTED_FIXED.size
        pose = _unpack_pose(rec, off)
        off += _POSE.size
        extent = _VEC3.unpack_from(rec, off)
        off += _VEC3.size
        velocity = _VEC3.unpack_from(rec, off)
        out.append(
            DetectedObject(actor_id, ObjectClass(cls), pose, extent, velocity, obj_stamp)
        )
    return stamp, out


def encode_tracked(stamp: float, objects: Iterable[TrackedObject]) -> bytes:
    records = []
    for o in objects:
        parts = [_TRACKED_FIXED.pack(o.actor_id, o.object_class.value, len(o.history))]
        parts += [
            _TRACK_POINT.pack(
                p.stamp,
                p.pose.x,
                p.pose.y,
                p.pose.z,
                p.pose.roll,
                p.pose.pitch,
                p.pose.yaw,
                *p.velocity,
            )
            for p in o.history
        ]
        records.append(b"".join(parts))
    return _frame(stamp, records)


def decode_tracked(payload: bytes) -> tuple[float, list[TrackedObject]]:
    stamp, records = _records(payload)
    out = []
    for rec in records:
        actor_id, cls, count = _TRACKED_FIXED.unpack_from(rec, 0)
        off = _TRACKED_FIXED.size
        points = []
        for _ in range(count):
            vals = _TRACK_POINT.unpack_from(rec, off)
            off += _TRACK_POINT.size
            points.append(TrackPoint(vals[0], Pose(*vals[1:7]), vals[7:10]))
        out.append(TrackedObject(actor_id, ObjectClass(cls), tuple(points)))
    return stamp, out


def encode_predicted(stamp: float, objects: Iterable[PredictedObject]) -> bytes:
    records = []
    for o in objects:
        parts = [
            _PREDICTED_FIXED.pack(
                o.actor_id, o.object_class.value, o.source.value, len(o.path)
            )
        ]
        parts += [
            _PATH_POINT.pack(t, p.x, p.y, p.z, p.roll, p.pitch, p.yaw)
            for t, p in o.path
        ]
        records.append(b"".join(parts))
    return _frame(stamp, records)


def decode_predicted(payload: bytes) -> tuple[float, list[PredictedObject]]:
    stamp, records = _records(payload)
    out = []
    for rec in records:
        actor_id, cls, source, count = _PREDICTED_FIXED.unpack_from(rec, 0)
        off = _PREDICTED_FIXED.size
        path = []
        for _ in range(count):
            vals = _PATH_POINT.unpack_from(rec, off)
            off += _PATH_POINT.size
            path.append((vals[0], Pose(*vals[1:7])))
        out.append(
            PredictedObject(actor_id, ObjectClass(cls), PathSource(source), tuple(path))
        )
    return stamp, out


# -- bus glue ----------------------------------------------------------------


class GroundTruthPublisher:
    """Publishes all three streams on every snapshot it is fed."""

    def __init__(
        self,
        bus,
        road: RoadNetwork,
        *,
        buffer_s: float = DEFAULT_BUFFER_S,
        horizon_s: float = DEFAULT_HORIZON_S,
        resolution_s: float = DEFAULT_RESOLUTION_S,
        agents: Optional[Callable[[], Mapping[int, PlanProvider]]] = None,
        qos=None,
        depth: int = 4,
    ):
        from .bus import Reliability, TopicSpec

        self.road = road
        self.tracker = Tracker(buffer_s)
        self.horizon_s = horizon_s
        self.resolution_s = resolution_s
        self._agents = agents or (lambda: {})
        qos = qos if qos is not None else Reliability.BEST_EFFORT
        self._pub_detected = bus.advertise(TopicSpec(DETECTED_TOPIC, qos, depth))
        self._pub_tracked = bus.advertise(TopicSpec(TRACKED_TOPIC, qos, depth))
        self._pub_predicted = bus.advertise(TopicSpec(PREDICTED_TOPIC, qos, depth))

    def publish(self, snapshot: Snapshot) -> None:
        t = snapshot.sim_time
        detected = detected_objects(snapshot)
        tracked = self.tracker.update(snapshot)
        predicted = predicted_objects(
            snapshot,
            self.road,
            self._agents(),
            horizon_s=self.horizon_s,
            resolution_s=self.resolution_s,
        )
        self._pub_detected.publish(t, encode_detected(t, detected))
        self._pub_tracked.publish(t, encode_tracked(t, tracked))
        self._pub_predicted.publish(t, encode_predicted(t, predicted))
