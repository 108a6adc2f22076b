"""Sensor kit: config-driven factory wiring sensor models to the bus.

The kit owns one node per mount.  After each world tick the owner calls
``dispatch(snapshot)``; nodes whose period divides the tick index fire.
In realtime mode the actual sampling runs on a dedicated worker thread
fed through a depth-2 queue — if sensing falls behind, the blocking
hand-off applies backpressure to the tick loop, which shows up honestly
as overrun events instead of silently stale data.
"""
from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..bus import Bus, Publisher, Reliability, TopicSpec
from ..geom import Pose
from ..world import Snapshot, TickMode, World
from .camera import CameraModel, encode_image
from .config import (
    BadParam,
    DuplicateFrame,
    SensorKind,
    SensorMount,
    SensorTypeDef,
    UnknownMount,
)
from .lidar import LidarModel, encode_pointcloud
from .nav import GnssSampler, ImuSampler, OdometrySampler

TF_STATIC_TOPIC = "/tf_static"
SENSOR_QOS_DEPTH = 1  # newest-wins for high-rate sensor streams
CAMERA_INFO_SUFFIX = "/camera_info"
IMAGE_TOPIC_LEAF = "/image_resized"


@dataclass(frozen=True)
class TransformEdge:
    parent_frame: str
    child_frame: str
    translation: tuple[float, float, float]
    rotation: tuple[float, float, float]


@dataclass(frozen=True)
class TransformTree:
    edges: tuple[TransformEdge, ...]

    def to_payload(self) -> bytes:
        return json.dumps(
            [
                {
                    "parent": e.parent_frame,
                    "child": e.child_frame,
                    "translation": list(e.translation),
                    "rotation": list(e.rotation),
                }
                for e in self.edges
            ]
        ).encode("utf-8")


def static_transforms(
    specs: list[tuple[SensorTypeDef, SensorMount]]
) -> TransformTree:
    """One base_link→frame edge per mount; frames must be unique."""
    edges = []
    seen: set[str] = set()
    for _typedef, mount in specs:
        if mount.frame_id in seen:
            raise DuplicateFrame(f"frame_id {mount.frame_id!r} used more than once")
        seen.add(mount.frame_id)
        edges.append(
            TransformEdge(
                "base_link", mount.frame_id, mount.translation, mount.rotation
            )
        )
    return TransformTree(tuple(edges))


def camera_info_topic(image_topic: str) -> str:
    if image_topic.endswith(IMAGE_TOPIC_LEAF):
        return image_topic[: -len(IMAGE_TOPIC_LEAF)] + CAMERA_INFO_SUFFIX
    return image_topic + CAMERA_INFO_SUFFIX


class _Node:
    """One mounted sensor: model + publishers + firing period."""

    def __init__(
        self,
        typedef: SensorTypeDef,
        mount: SensorMount,
        period_ticks: int,
        rng: np.random.Generator,
        publishers: dict[str, Publisher],
    ):
        self.typedef = typedef
        self.mount = mount
        self.period_ticks = period_ticks
        self.rng = rng
        self.publishers = publishers
        kind = typedef.kind
        self.lidar: Optional[LidarModel] = None
        self.camera: Optional[CameraModel] = None
        self.gnss: Optional[GnssSampler] = None
        self.imu: Optional[ImuSampler] = None
        self.odom: Optional[OdometrySampler] = None
        if kind is SensorKind.LIDAR:
            self.lidar = LidarModel(typedef, mount.frame_id)
        elif kind is SensorKind.CAMERA:
            self.camera = CameraModel(typedef, mount.frame_id)
        elif kind is SensorKind.GNSS:
            self.gnss = GnssSampler(typedef, mount.frame_id)
        elif kind is SensorKind.IMU:
            self.imu = ImuSampler(typedef, mount.frame_id)
        elif kind is SensorKind.ODOMETRY:
            self.odom = OdometrySampler(typedef, mount.frame_id)
        elif kind is SensorKind.GNSS_IMU:
            self.gnss = GnssSampler(typedef, mount.frame_id)
            self.imu = ImuSampler(typedef, mount.frame_id)

    def due(self, tick_index: int) -> bool:
        return tick_index % self.period_ticks == 0

    def fire(self, snapshot: Snapshot) -> None:
        ego = snapshot.ego
        if ego is None:
            return
        stamp = snapshot.sim_time
        mount_world = ego.pose.compose(self.mount.pose)
        if self.lidar is not None:
            cloud = self.lidar.scan(
                mount_world, snapshot, self.rng, exclude_id=ego.actor_id
            )
            self.publishers["data"].publish(stamp, encode_pointcloud(cloud))
        if self.camera is not None:
            img = self.camera.render(mount_world, snapshot, exclude_id=ego.actor_id)
            self.publishers["data"].publish(stamp, encode_image(img))
            self.publishers["camera_info"].publish(
                stamp, self.camera.camera_info(stamp)
            )
        if self.gnss is not None:
            self.publishers["data"].publish(stamp, self.gnss.sample(snapshot, self.rng))
        if self.imu is not None:
            key = "imu" if "imu" in self.publishers else "data"
            self.publishers[key].publish(stamp, self.imu.sample(snapshot, self.rng))
        if self.odom is not None:
            self.publishers["data"].publish(stamp, self.odom.sample(snapshot, self.rng))


class SensorKit:
    """Holds the nodes, the enable map, and the optional worker thread."""

    def __init__(self, nodes: dict[str, _Node], tree: TransformTree, threaded: bool):
        self._nodes = nodes
        self.tree = tree
        self._enabled = {name: node.mount.enabled for name, node in nodes.items()}
        self._lock = threading.Lock()
        self._queue: Optional[queue.Queue] = None
        self._worker: Optional[threading.Thread] = None
        if threaded:
            self._queue = queue.Queue(maxsize=2)
            self._worker = threading.Thread(
                target=self._run_worker, name="sensor-kit", daemon=True
            )
            self._worker.start()

    # -- schedule -----------------------------------------------------
    def dispatch(self, snapshot: Snapshot) -> None:
        """Fire every node whose period divides this tick. Call after tick()."""
        due = [n for n in self._nodes.values() if n.due(snapshot.tick_index)]
        if not due:
            return
        if self._queue is not None:
            self._queue.put((snapshot, due))  # blocks when sensing lags
        else:
            self._fire(snapshot, due)

    def _fire(self, snapshot: Snapshot, due: list[_Node]) -> None:
        for node in due:
            with self._lock:
                enabled = self._enabled[node.mount.name]
            if enabled:
                node.fire(snapshot)

    def _run_worker(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            snapshot, due = item
            self._fire(snapshot, due)

    def close(self) -> None:
        if self._queue is not None and self._worker is not None:
            self._queue.put(None)
            self._worker.join(timeout=5.0)
            self._worker = None

    # -- control ------------------------------------------------------
    def mount_names(self) -> list[str]:
        return sorted(self._nodes)

    def _check(self, mount_name: str) -> None:
        if mount_name not in self._nodes:
            raise UnknownMount(f"no mount named {mount_name!r}")

    def set_enabled(self, mount_name: str, enabled: bool) -> None:
        self._check(mount_name)
        with self._lock:
            self._enabled[mount_name] = enabled

    def is_enabled(self, mount_name: str) -> bool:
        self._check(mount_name)
        with self._lock:
            return self._enabled[mount_name]

    def node(self, mount_name: str) -> _Node:
        self._check(mount_name)
        return self._nodes[mount_name]

    def topics(self) -> list[str]:
        out = []
        for node in self._nodes.values():
            out.extend(p.spec.name for p in node.publishers.values())
        return sorted(out)


def set_sensor_enabled(kit: SensorKit, mount_name: str, enabled: bool) -> None:
    kit.set_enabled(mount_name, enabled)


def build_sensor_kit(
    specs: list[tuple[SensorTypeDef, SensorMount]],
    world: World,
    bus: Bus,
) -> SensorKit:
    """One node per mount, publishers advertised, transforms latched."""
    dt = world.clock.dt
    nodes: dict[str, _Node] = {}
    for index, (typedef, mount) in enumerate(specs):
        period_ticks = max(1, round(typedef.sensor_tick / dt))
        rng = np.random.default_rng([world.seed, index])
        publishers: dict[str, Publisher] = {
            "data": bus.advertise(
                TopicSpec(mount.topic, Reliability.BEST_EFFORT, SENSOR_QOS_DEPTH)
            )
        }
        if typedef.kind is SensorKind.CAMERA:
            info_topic = mount.extra_topics.get(
                "camera_info", camera_info_topic(mount.topic)
            )
            publishers["camera_info"] = bus.advertise(
                TopicSpec(info_topic, Reliability.BEST_EFFORT, SENSOR_QOS_DEPTH)
            )
        if typedef.kind is SensorKind.GNSS_IMU:
            if "imu" not in mount.extra_topics:
                raise BadParam(
                    mount.name, "combined gnss+imu mount needs extra_topics.imu"
                )
            publishers["imu"] = bus.advertise(
                TopicSpec(
                    mount.extra_topics["imu"],
                    Reliability.BEST_EFFORT,
                    SENSOR_QOS_DEPTH,
                )
            )
        nodes[mount.name] = _Node(typedef, mount, period_ticks, rng, publishers)

    tree = static_transforms(specs)
    tf_pub = bus.advertise(
        TopicSpec(TF_STATIC_TOPIC, Reliability.RELIABLE, depth=10, latched=True)
    )
    tf_pub.publish(world.snapshot().sim_time, tree.to_payload())

    threaded = world.clock.mode is TickMode.SYNC_REALTIME
    return SensorKit(nodes, tree, threaded)
