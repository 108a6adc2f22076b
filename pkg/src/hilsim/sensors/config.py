"""Two-stage sensor configuration: type definitions + mounts.

The first YAML file defines sensor *types* (a name, a kind, and flat
blueprint-style parameters).  The second file defines *mounts*: where a
sensor of some type sits on the vehicle, which topic and frame it owns,
and whether it starts enabled.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import yaml

from ..geom import Pose


class SensorConfigError(Exception):
    pass


class UnknownType(SensorConfigError):
    pass


class DuplicateTopic(SensorConfigError):
    pass


class DuplicateFrame(SensorConfigError):
    pass


class UnknownMount(SensorConfigError):
    pass


class BadParam(SensorConfigError):
    def __init__(self, name: str, reason: str):
        super().__init__(f"{name}: {reason}")
        self.name = name
        self.reason = reason


class SensorKind(enum.Enum):
    LIDAR = "lidar"
    CAMERA = "camera"
    GNSS = "gnss"
    IMU = "imu"
    ODOMETRY = "odometry"
    GNSS_IMU = "gnss_imu"  # composite: one mount, two primitive samplers


# accepted per-kind parameter keys with defaults (None = required)
_LIDAR_PARAMS: dict[str, Any] = {
    "horizontal_fov": None,
    "vertical_fov": None,
    "horizontal_resolution": None,
    "vertical_channels": None,
    "sensor_tick": None,
    "range": None,
    "x_standard_deviation": 0.0,
    "y_standard_deviation": 0.0,
    "z_standard_deviation": 0.0,
    "scan_pattern_path": "",
}
_CAMERA_PARAMS: dict[str, Any] = {
    "image_size_x": None,
    "image_size_y": None,
    "sensor_tick": None,
    "fov": None,
    # pass-through optical metadata (accepted, not modeled)
    "iso": 100.0,
    "gamma": 2.2,
    "focal_distance": 0.0,
}
_NAV_PARAMS: dict[str, Any] = {
    "sensor_tick": None,
    "x_standard_deviation": 0.0,
    "y_standard_deviation": 0.0,
    "z_standard_deviation": 0.0,
}
# satellite-fix kinds additionally carry the map origin used for the
# local-tangent-plane to geodetic conversion
_GNSS_PARAMS: dict[str, Any] = {
    **_NAV_PARAMS,
    "origin_latitude": 0.0,
    "origin_longitude": 0.0,
    "origin_altitude": 0.0,
}
_PARAM_TABLE = {
    SensorKind.LIDAR: _LIDAR_PARAMS,
    SensorKind.CAMERA: _CAMERA_PARAMS,
    SensorKind.GNSS: _GNSS_PARAMS,
    SensorKind.IMU: _NAV_PARAMS,
    SensorKind.ODOMETRY: _NAV_PARAMS,
    SensorKind.GNSS_IMU: _GNSS_PARAMS,
}


@dataclass(frozen=True)
class SensorTypeDef:
    name: str
    kind: SensorKind
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def sensor_tick(self) -> float:
        return float(self.params["sensor_tick"])


@dataclass(frozen=True)
class SensorMount:
    name: str
    type_name: str
    topic: str
    frame_id: str
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    enabled: bool = True
    # composite mounts publish several primitive streams; extra topics land
    # here keyed by their role (e.g. {"imu": "/vehicle/sensor/imu1"})
    extra_topics: dict[str, str] = field(default_factory=dict)

    @property
    def pose(self) -> Pose:
        return Pose(*self.translation, *self.rotation)

    def all_topics(self) -> list[str]:
        return [self.topic, *self.extra_topics.values()]


def _validate_type(name: str, kind: SensorKind, raw: dict) -> dict:
    table = _PARAM_TABLE[kind]
    params: dict[str, Any] = {}
    for key, default in table.items():
        if key in raw:
            params[key] = raw[key]
        elif default is None:
            raise BadParam(name, f"missing required parameter {key!r}")
        else:
            params[key] = default
    unknown = set(raw) - set(table)
    if unknown:
        raise BadParam(name, f"unknown parameters {sorted(unknown)}")

    tick = params["sensor_tick"]
    if not (isinstance(tick, (int, float)) and tick > 0):
        raise BadParam(name, "sensor_tick must be > 0")
    if kind is SensorKind.LIDAR:
        fov = params["horizontal_fov"]
        if not (0 < fov <= 360):
            raise BadParam(name, "horizontal_fov must be in (0, 360]")
        if not (0 < params["vertical_fov"] <= 180):
            raise BadParam(name, "vertical_fov must be in (0, 180]")
        if not params["horizontal_resolution"] > 0:
            raise BadParam(name, "horizontal_resolution must be > 0")
        channels = params["vertical_channels"]
        if not (isinstance(channels, int) and channels >= 1):
            raise BadParam(name, "vertical_channels must be an integer >= 1")
        if not params["range"] > 0:
            raise BadParam(name, "range must be > 0")
        for axis in "xyz":
            if params[f"{axis}_standard_deviation"] < 0:
                raise BadParam(name, f"{axis}_standard_deviation must be >= 0")
    elif kind is SensorKind.CAMERA:
        for key in ("image_size_x", "image_size_y"):
            if not (isinstance(params[key], int) and params[key] > 0):
                raise BadParam(name, f"{key} must be an integer > 0")
        if not (0 < params["fov"] < 180):
            raise BadParam(name, "fov must be in (0, 180) for a pinhole model")
    else:
        for axis in "xyz":
            if params[f"{axis}_standard_deviation"] < 0:
                raise BadParam(name, f"{axis}_standard_deviation must be >= 0")
    return params


def parse_types(doc: dict) -> dict[str, SensorTypeDef]:
    """Parse the sensor-types document: {types: {name: {kind, <params>}}}."""
    out: dict[str, SensorTypeDef] = {}
    entries = doc.get("types") or {}
    for name, body in entries.items():
        if not isinstance(body, dict) or "kind" not in body:
            raise BadParam(name, "type entry needs a 'kind'")
        try:
            kind = SensorKind(body["kind"])
        except ValueError:
            raise BadParam(name, f"unknown kind {body['kind']!r}") from None
        raw = {k: v for k, v in body.items() if k != "kind"}
        out[name] = SensorTypeDef(name, kind, _validate_type(name, kind, raw))
    return out


def parse_mounts(doc: dict, types: dict[str, SensorTypeDef]) -> list[SensorMount]:
    """Parse the mounts document: {mounts: [{name, type, topic, ...}]}."""
    mounts: list[SensorMount] = []
    seen_topics: set[str] = set()
    seen_frames: set[str] = set()
    seen_names: set[str] = set()
    for entry in doc.get("mounts") or []:
        type_name = entry.get("type", "")
        if type_name not in types:
            raise UnknownType(f"mount references undefined type {type_name!r}")
        frame_id = entry.get("frame_id")
        if not frame_id:
            raise BadParam(type_name, "mount needs a frame_id")
        name = entry.get("name", frame_id)
        topic = entry.get("topic")
        extra = dict(entry.get("extra_topics") or {})
        if not topic:
            raise BadParam(name, "mount needs a topic")
        mount = SensorMount(
            name=name,
            type_name=type_name,
            topic=topic,
            frame_id=frame_id,
            translation=tuple(float(v) for v in entry.get("translation", (0, 0, 0))),
            rotation=tuple(float(v) for v in entry.get("rotation", (0, 0, 0))),
            enabled=bool(entry.get("enabled", True)),
            extra_topics=extra,
        )
        if name in seen_names:
            raise BadParam(name, "duplicate mount name")
        seen_names.add(name)
        for t in mount.all_topics():
            if t in seen_topics:
                raise DuplicateTopic(f"topic {t!r} used by more than one mount")
            seen_topics.add(t)
        if frame_id in seen_frames:
            raise DuplicateFrame(f"frame_id {frame_id!r} used more than once")
        seen_frames.add(frame_id)
        mounts.append(mount)
    return mounts


def load_sensor_config(
    types_path, mounts_path
) -> list[tuple[SensorTypeDef, SensorMount]]:
    """Load and cross-validate both YAML files; returns resolved pairs."""
    with open(types_path, "r", encoding="utf-8") as fh:
        types = parse_types(yaml.safe_load(fh) or {})
    with open(mounts_path, "r", encoding="utf-8") as fh:
        mounts = parse_mounts(yaml.safe_load(fh) or {}, types)
    return [(types[m.type_name], m) for m in mounts]


def packaged_config_paths() -> tuple[str, str]:
    """Paths of the full vehicle sensor kit shipped with the package."""
    root = resources.files("hilsim") / "data"
    return str(root / "sensor_types.yaml"), str(root / "sensor_mounts.yaml")


def packaged_light_types_path() -> str:
    """Reduced-fidelity type catalog: same names, cadences, and noise as
    the full kit, but tiny ray/pixel counts — for long functional runs
    where message timing matters and image or cloud content does not.
    """
    return str(resources.files("hilsim") / "data" / "sensor_types_light.yaml")
