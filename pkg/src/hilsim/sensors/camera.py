"""Synthetic pinhole camera over the same analytic scene as the range
sensor: actor boxes shaded by a stable per-actor color, a checkerboard
ground plane, and a constant sky.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geom import Pose
from ..world import Snapshot
from .config import SensorTypeDef
from .lidar import _BoxCulls, ray_box_t, ray_ground_t, scene_boxes

SKY_COLOR = (135, 206, 235)
GROUND_LIGHT = (140, 140, 140)
GROUND_DARK = (101, 101, 101)
CHECKER_SIZE = 2.0  # meters per checkerboard square

_IMAGE_HEADER = struct.Struct("<dIIH")  # stamp, width, height, frame_id length


@dataclass(frozen=True)
class Image:
    stamp: float
    frame_id: str
    width: int
    height: int
    data: bytes  # RGB8, row-major, exactly width*height*3 bytes


def encode_image(img: Image) -> bytes:
    frame = img.frame_id.encode("utf-8")
    header = _IMAGE_HEADER.pack(img.stamp, img.width, img.height, len(frame))
    return header + frame + img.data


def decode_image(raw: bytes) -> Image:
    stamp, width, height, frame_len = _IMAGE_HEADER.unpack_from(raw, 0)
    off = _IMAGE_HEADER.size
    frame = raw[off : off + frame_len].decode("utf-8")
    data = raw[off + frame_len :]
    if len(data) != width * height * 3:
        raise ValueError("image payload length mismatch")
    return Image(stamp, frame, width, height, data)


def actor_color(actor_id: int) -> tuple[int, int, int]:
    """Stable, mid-range RGB color derived from the actor id."""
    h = (actor_id * 2654435761) & 0xFFFFFFFF
    return (64 + (h & 0x7F), 64 + ((h >> 8) & 0x7F), 64 + ((h >> 16) & 0x7F))


class CameraModel:
    def __init__(self, typedef: SensorTypeDef, frame_id: str = "camera"):
        p = typedef.params
        self.width = int(p["image_size_x"])
        self.height = int(p["image_size_y"])
        self.fov_deg = float(p["fov"])
        self.frame_id = frame_id
        self.fx = (self.width / 2.0) / np.tan(np.radians(self.fov_deg) / 2.0)
        self.fy = self.fx
        self.cx = self.width / 2.0
        self.cy = self.height / 2.0
        # per-pixel unit rays in the camera frame (x forward, y left, z up);
        # pixel centers sit at +0.5, u grows rightward, v grows downward
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        dirs = np.stack(
            [
                np.ones_like(uu),
                -(uu - self.cx) / self.fx,
                -(vv - self.cy) / self.fy,
            ],
            axis=-1,
        ).reshape(-1, 3)
        self.pixel_dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def camera_info(self, stamp: float) -> bytes:
        """Intrinsics companion message (JSON payload)."""
        return json.dumps(
            {
                "stamp": stamp,
                "frame_id": self.frame_id,
                "width": self.width,
                "height": self.height,
                "fx": self.fx,
                "fy": self.fy,
                "cx": self.cx,
                "cy": self.cy,
                "distortion": [0.0, 0.0, 0.0, 0.0, 0.0],
            }
        ).encode("utf-8")

    def render(
        self,
        mount_pose_world: Pose,
        snapshot: Snapshot,
        exclude_id: Optional[int] = None,
    ) -> Image:
        origin = np.asarray(mount_pose_world.position, dtype=float)
        rot = mount_pose_world.rotation()
        d_world = self.pixel_dirs @ rot.T
        n = len(d_world)

        rgb = np.empty((n, 3), dtype=np.uint8)
        rgb[:] = SKY_COLOR

        t_ground = ray_ground_t(origin, d_world)
        ground_hit = np.isfinite(t_ground)
        if np.any(ground_hit):
            hit = origin + t_ground[ground_hit, None] * d_world[ground_hit]
            parity = (
                np.floor(hit[:, 0] / CHECKER_SIZE) + np.floor(hit[:, 1] / CHECKER_SIZE)
            ).astype(int) & 1
            rgb[ground_hit] = np.where(
                parity[:, None] == 0,
                np.array(GROUND_LIGHT, dtype=np.uint8),
                np.array(GROUND_DARK, dtype=np.uint8),
            )
        t_best = np.where(ground_hit, t_ground, np.inf)

        states = [s for s in snapshot.actors if s.actor_id != exclude_id]
        boxes = scene_boxes(snapshot, exclude_id)
        culls = _BoxCulls(origin, boxes)
        for j, (state, box) in enumerate(zip(states, boxes)):
            cand = culls.candidates(d_world, j)
            if cand is None:
                t_box = ray_box_t(origin, d_world, box)
                closer = t_box < t_best
                if np.any(closer):
                    rgb[closer] = actor_color(state.actor_id)
                    t_best = np.where(closer, t_box, t_best)
            elif cand.size:
                t_box = ray_box_t(origin, d_world[cand], box)
                closer = t_box < t_best[cand]
                if np.any(closer):
                    idx = cand[closer]
                    rgb[idx] = actor_color(state.actor_id)
                    t_best[idx] = t_box[closer]

        return Image(
            snapshot.sim_time,
            self.frame_id,
            self.width,
            self.height,
            rgb.tobytes(),
        )


def camera_frame(
    typedef: SensorTypeDef,
    mount_pose_world: Pose,
    snapshot: Snapshot,
    frame_id: str = "camera",
    exclude_id: Optional[int] = None,
) -> Image:
    return CameraModel(typedef, frame_id).render(mount_pose_world, snapshot, exclude_id)
