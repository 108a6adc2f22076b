"""Navigation sensors: satellite fix, inertial unit, wheel odometry.

All three sample the ego actor from a world snapshot and emit small JSON
payloads.  The inertial unit differentiates consecutive snapshots, so
each sampler instance keeps the previous sample as state.
"""
from __future__ import annotations

import json
import math
from typing import Optional

import numpy as np

from ..actuation import NoEgo
from ..geom import normalize_angle
from ..world import ActorState, Snapshot
from .config import SensorTypeDef

GRAVITY = 9.81  # reported as +g on body z when stationary
EARTH_RADIUS = 6378137.0  # equatorial, meters


def enu_to_wgs84(
    east: float,
    north: float,
    up: float,
    origin_lat: float,
    origin_lon: float,
    origin_alt: float = 0.0,
) -> tuple[float, float, float]:
    """Small-offset local-tangent-plane to geodetic conversion."""
    lat = origin_lat + math.degrees(north / EARTH_RADIUS)
    lon = origin_lon + math.degrees(
        east / (EARTH_RADIUS * math.cos(math.radians(origin_lat)))
    )
    return lat, lon, origin_alt + up


def _require_ego(snapshot: Snapshot) -> ActorState:
    ego = snapshot.ego
    if ego is None:
        raise NoEgo("no ego actor in snapshot")
    return ego


class GnssSampler:
    def __init__(self, typedef: SensorTypeDef, frame_id: str = "gnss"):
        p = typedef.params
        self.frame_id = frame_id
        self.origin = (
            float(p.get("origin_latitude", 0.0)),
            float(p.get("origin_longitude", 0.0)),
            float(p.get("origin_altitude", 0.0)),
        )
        self.noise_std = np.array(
            [
                p.get("x_standard_deviation", 0.0),
                p.get("y_standard_deviation", 0.0),
                p.get("z_standard_deviation", 0.0),
            ],
            dtype=float,
        )

    def sample(
        self, snapshot: Snapshot, rng: Optional[np.random.Generator] = None
    ) -> bytes:
        ego = _require_ego(snapshot)
        east, north, up = ego.pose.position
        if rng is not None and np.any(self.noise_std > 0):
            east, north, up = (
                np.array([east, north, up])
                + rng.normal(0.0, 1.0, 3) * self.noise_std
            )
        lat, lon, alt = enu_to_wgs84(east, north, up, *self.origin)
        return json.dumps(
            {
                "stamp": snapshot.sim_time,
                "frame_id": self.frame_id,
                "latitude": lat,
                "longitude": lon,
                "altitude": alt,
                "status": 0,
            }
        ).encode("utf-8")


class ImuSampler:
    def __init__(self, typedef: SensorTypeDef, frame_id: str = "imu"):
        p = typedef.params
        self.frame_id = frame_id
        self.noise_std = np.array(
            [
                p.get("x_standard_deviation", 0.0),
                p.get("y_standard_deviation", 0.0),
                p.get("z_standard_deviation", 0.0),
            ],
            dtype=float,
        )
        self._prev: Optional[tuple[float, np.ndarray, tuple[float, float, float]]] = (
            None
        )

    def sample(
        self, snapshot: Snapshot, rng: Optional[np.random.Generator] = None
    ) -> bytes:
        ego = _require_ego(snapshot)
        vel = np.asarray(ego.velocity, dtype=float)
        rpy = ego.pose.rpy
        rot = ego.pose.rotation()

        accel_world = np.zeros(3)
        gyro = np.zeros(3)
        if self._prev is not None:
            t_prev, v_prev, rpy_prev = self._prev
            dt = snapshot.sim_time - t_prev
            if dt > 0:
                accel_world = (vel - v_prev) / dt
                gyro = np.array(
                    [
                        normalize_angle(rpy[0] - rpy_prev[0]) / dt,
                        normalize_angle(rpy[1] - rpy_prev[1]) / dt,
                        normalize_angle(rpy[2] - rpy_prev[2]) / dt,
                    ]
                )
        self._prev = (snapshot.sim_time, vel, rpy)

        accel_body = rot.T @ accel_world + np.array([0.0, 0.0, GRAVITY])
        if rng is not None and np.any(self.noise_std > 0):
            accel_body = accel_body + rng.normal(0.0, 1.0, 3) * self.noise_std
        return json.dumps(
            {
                "stamp": snapshot.sim_time,
                "frame_id": self.frame_id,
                "linear_acceleration": list(accel_body),
                "angular_velocity": list(gyro),
                "orientation_rpy": list(rpy),
            }
        ).encode("utf-8")


class OdometrySampler:
    def __init__(self, typedef: SensorTypeDef, frame_id: str = "odom"):
        self.frame_id = frame_id
        p = typedef.params
        self.noise_std = np.array(
            [
                p.get("x_standard_deviation", 0.0),
                p.get("y_standard_deviation", 0.0),
                p.get("z_standard_deviation", 0.0),
            ],
            dtype=float,
        )

    def sample(
        self, snapshot: Snapshot, rng: Optional[np.random.Generator] = None
    ) -> bytes:
        ego = _require_ego(snapshot)
        pos = np.asarray(ego.pose.position, dtype=float)
        if rng is not None and np.any(self.noise_std > 0):
            pos = pos + rng.normal(0.0, 1.0, 3) * self.noise_std
        linear_body = ego.pose.rotation().T @ np.asarray(ego.velocity, dtype=float)
        return json.dumps(
            {
                "stamp": snapshot.sim_time,
                "frame_id": "map",
                "child_frame_id": self.frame_id,
                "position": list(pos),
                "orientation_rpy": list(ego.pose.rpy),
                "linear": list(linear_body),
                "angular": [0.0, 0.0, ego.yaw_rate],
            }
        ).encode("utf-8")


def nav_sample(
    kind: str,
    typedef: SensorTypeDef,
    snapshot: Snapshot,
    rng: Optional[np.random.Generator] = None,
    frame_id: str = "nav",
) -> bytes:
    """One-shot convenience for stateless sampling (fresh sampler per call)."""
    sampler = {
        "gnss": GnssSampler,
        "imu": ImuSampler,
        "odometry": OdometrySampler,
    }[kind](typedef, frame_id)
    return sampler.sample(snapshot, rng)
