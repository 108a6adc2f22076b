"""Pose math and planar oriented-box tests shared across the simulator.

Coordinates are ENU with z up; yaw is counter-clockwise from +x, angles in
radians normalized to (-pi, pi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


@dataclass(frozen=True, slots=True)
class Pose:
    """Position (m) plus roll/pitch/yaw (rad), normalized at construction."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "roll", normalize_angle(self.roll))
        object.__setattr__(self, "pitch", normalize_angle(self.pitch))
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def rpy(self) -> tuple[float, float, float]:
        return (self.roll, self.pitch, self.yaw)

    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.roll, self.pitch, self.yaw)

    def compose(self, child: "Pose") -> "Pose":
        """Pose of `child` (given in this pose's frame) in the parent frame."""
        r = self.rotation()
        p = r @ child.position + self.position
        rc = r @ child.rotation()
        roll, pitch, yaw = rpy_from_matrix(rc)
        return Pose(p[0], p[1], p[2], roll, pitch, yaw)


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X (yaw-pitch-roll) intrinsic rotation, body-to-world."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def rpy_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if abs(r[2, 0]) < 1.0 - 1e-12:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    else:
        # gimbal lock: fold roll into yaw
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    return roll, pitch, yaw


def _rect_corners(cx: float, cy: float, yaw: float, hx: float, hy: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def obb_overlap_2d(
    a_center: tuple[float, float],
    a_yaw: float,
    a_half: tuple[float, float],
    b_center: tuple[float, float],
    b_yaw: float,
    b_half: tuple[float, float],
) -> bool:
    """Separating-axis overlap test for two ground-plane oriented rectangles.

    Touching edges count as overlap.
    """
    ca = _rect_corners(*a_center, a_yaw, *a_half)
    cb = _rect_corners(*b_center, b_yaw, *b_half)
    for yaw in (a_yaw, b_yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
