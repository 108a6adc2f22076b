"""Scanning range sensor over analytic scene geometry.

Scene model: the ground plane z=0 plus one oriented box per actor.  An
actor's pose marks the center of its box (a vehicle resting on the
ground therefore has pose z equal to its half-height).

Rendering runs per azimuth sector.  Rays inside one sector are treated
as pixels of a planar depth image oriented along the sector center:
each scene object fills its planar depth per pixel, a z-buffer keeps
the nearest, and the kept depth is re-projected back through the pixel
ray into a 3-D point.  Because the re-projection inverts the pixel
mapping exactly, the emitted points equal the analytic nearest-hit
intersection (no resolution loss from the intermediate image).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geom import Pose
from ..world import Snapshot
from .config import SensorTypeDef
from .rays import RayGrid, build_grid_rays, load_scan_pattern, sector_assignment

_EPS = 1e-9

_NOISE_CHUNK = 16384  # rows per RNG draw; bounds single-call latency

POINT_STRIDE = 16  # x, y, z, intensity as little-endian f32

_CLOUD_HEADER = struct.Struct("<dIH")  # stamp, point count, frame_id length


@dataclass(frozen=True)
class PointCloud:
    stamp: float
    frame_id: str
    data: bytes  # packed (x, y, z, intensity) f32 records

    @property
    def count(self) -> int:
        return len(self.data) // POINT_STRIDE

    def xyzi(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype="<f4").reshape(-1, 4)


def pack_points(xyzi: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(xyzi, dtype="<f4").reshape(-1, 4))
    return arr.tobytes()


def encode_pointcloud(cloud: PointCloud) -> bytes:
    frame = cloud.frame_id.encode("utf-8")
    header = _CLOUD_HEADER.pack(cloud.stamp, cloud.count, len(frame))
    return header + frame + cloud.data


def decode_pointcloud(raw: bytes) -> PointCloud:
    stamp, count, frame_len = _CLOUD_HEADER.unpack_from(raw, 0)
    off = _CLOUD_HEADER.size
    frame = raw[off : off + frame_len].decode("utf-8")
    data = raw[off + frame_len :]
    if len(data) != count * POINT_STRIDE:
        raise ValueError("point cloud payload length mismatch")
    return PointCloud(stamp, frame, data)


@dataclass(frozen=True)
class _Box:
    center: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3) body -> world
    half: np.ndarray  # (3,)


def scene_boxes(snapshot: Snapshot, exclude_id: Optional[int]) -> list[_Box]:
    boxes = []
    for a in snapshot.actors:
        if a.actor_id == exclude_id:
            continue
        rot = a.pose.rotation()
        half = np.asarray(a.bbox_extent, dtype=float)
        boxes.append(_Box(np.asarray(a.pose.position, dtype=float), rot, half))
    return boxes


def ray_box_t(origin: np.ndarray, dirs: np.ndarray, box: _Box) -> np.ndarray:
    """Nearest positive hit parameter per ray against one box (inf = miss)."""
    p = box.rotation.T @ (origin - box.center)  # origin in box frame
    q = dirs @ box.rotation  # directions in box frame
    t_lo = np.full(len(dirs), -np.inf)
    t_hi = np.full(len(dirs), np.inf)
    alive = np.ones(len(dirs), dtype=bool)
    for axis in range(3):
        qa = q[:, axis]
        parallel = np.abs(qa) < _EPS
        # parallel rays miss unless the origin sits inside this slab
        alive &= ~parallel | (np.abs(p[axis]) <= box.half[axis])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-box.half[axis] - p[axis]) / qa
            t2 = (box.half[axis] - p[axis]) / qa
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        t_lo = np.where(parallel, t_lo, np.maximum(t_lo, near))
        t_hi = np.where(parallel, t_hi, np.minimum(t_hi, far))
    alive &= t_hi >= np.maximum(t_lo, _EPS)
    # origin inside the box: nearest positive crossing is the exit face
    t = np.where(t_lo > _EPS, t_lo, t_hi)
    return np.where(alive & (t > _EPS), t, np.inf)


def ray_ground_t(origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Hit parameter against the z=0 plane (double-sided, inf = miss)."""
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    return np.where((np.abs(dz) >= _EPS) & (t > _EPS), t, np.inf)


class _BoxCulls:
    """Batched bounding-sphere culls for one origin against many boxes.

    Conservative pre-filter: a positive hit at o + t·d lies within
    ‖half‖ of the box center c, so the quadratic ‖t·d − (c − o)‖² ≤ r²
    has a positive root, which for unit d requires
    d·(c − o) ≥ sqrt(‖c − o‖² − r²).  Rays not reported as candidates
    are guaranteed to get inf from ray_box_t.  The ray·offset products
    for every box are computed in one matrix multiply per ray set.
    """

    def __init__(self, origin: np.ndarray, boxes: list[_Box]):
        if boxes:
            centers = np.stack([b.center for b in boxes])
            w = centers - origin
            d2 = np.einsum("ij,ij->i", w, w)
            r2 = np.array([float(b.half @ b.half) for b in boxes])
            self._inside = d2 <= r2
            self._thresh = np.sqrt(np.maximum(d2 - r2, 0.0)) - 1e-9
            self._w = w
        self._rays: Optional[np.ndarray] = None
        self._dots: Optional[np.ndarray] = None

    def candidates(self, dirs: np.ndarray, j: int) -> Optional[np.ndarray]:
        """Candidate ray indices for box j; None means every ray."""
        if self._inside[j]:
            return None  # origin inside the bounding sphere
        if dirs is not self._rays:
            self._rays = dirs
            self._dots = dirs @ self._w.T
        return np.nonzero(self._dots[:, j] >= self._thresh[j])[0]


def _rotz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class _SectorCache:
    """Pose-independent ray data for one azimuth sector."""

    idx: Optional[np.ndarray]  # ray indices; None = the whole grid
    dirs: np.ndarray  # (m, 3) unit rays, sensor frame
    rot: np.ndarray  # (3, 3) sector -> sensor
    d_sector: np.ndarray  # (m, 3) rays in the sector frame
    forward: np.ndarray  # (m,) sector-frame depth component
    planar: np.ndarray  # (m,) rays with a finite image-plane pixel
    all_planar: bool
    u: np.ndarray  # (m,) image-plane coordinates
    v: np.ndarray


class LidarModel:
    """One scanning unit: precomputed ray set + per-scan intersection."""

    def __init__(self, typedef: SensorTypeDef, frame_id: str = "lidar"):
        p = typedef.params
        pattern = p.get("scan_pattern_path") or ""
        if pattern:
            self.grid: RayGrid = load_scan_pattern(pattern)
        else:
            self.grid = build_grid_rays(
                p["horizontal_fov"],
                p["vertical_fov"],
                p["horizontal_resolution"],
                p["vertical_channels"],
            )
        self.range = float(p["range"])
        self.noise_std = np.array(
            [
                p["x_standard_deviation"],
                p["y_standard_deviation"],
                p["z_standard_deviation"],
            ],
            dtype=float,
        )
        self.frame_id = frame_id
        self.sector_idx, self.sector_centers = sector_assignment(
            self.grid, p["horizontal_fov"] if not pattern else _pattern_span(self.grid)
        )
        self._sectors = self._build_sector_caches()

    def _build_sector_caches(self) -> list["_SectorCache"]:
        """Pose-independent per-sector quantities, computed once."""
        caches = []
        n = len(self.grid)
        for s, center_az in enumerate(self.sector_centers):
            sel = self.sector_idx == s
            if not np.any(sel):
                continue
            covers_all = bool(sel.all())
            idx = None if covers_all else np.nonzero(sel)[0]
            dirs = self.grid.directions if covers_all else self.grid.directions[sel]
            sector_rot = _rotz(center_az)  # sector -> sensor
            d_sector = dirs @ sector_rot  # rows·R == Rᵀ·d
            # pixel coordinates of each ray on the sector's image plane
            forward = d_sector[:, 0]
            planar = forward > _EPS
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(planar, d_sector[:, 1] / forward, 0.0)
                v = np.where(planar, d_sector[:, 2] / forward, 0.0)
            caches.append(
                _SectorCache(
                    idx, dirs, sector_rot, d_sector, forward, planar,
                    bool(planar.all()), u, v,
                )
            )
        return caches

    def scan_points(
        self,
        mount_pose_world: Pose,
        snapshot: Snapshot,
        rng: Optional[np.random.Generator] = None,
        exclude_id: Optional[int] = None,
    ) -> np.ndarray:
        """Full-precision (n, 4) xyzi rows in the sensor frame."""
        origin = np.asarray(mount_pose_world.position, dtype=float)
        sensor_rot = mount_pose_world.rotation()  # sensor -> world
        boxes = scene_boxes(snapshot, exclude_id)

        n = len(self.grid)
        t_hit = np.full(n, np.inf)
        pts_sensor = np.zeros((n, 3))
        culls = _BoxCulls(origin, boxes)
        for sec in self._sectors:
            d_world = sec.dirs @ sensor_rot.T
            # z-buffer over scene objects in planar-depth space
            t_best = ray_ground_t(origin, d_world)
            depth = t_best * sec.forward
            for j, box in enumerate(boxes):
                cand = culls.candidates(d_world, j)
                if cand is None:
                    t_box = ray_box_t(origin, d_world, box)
                elif sec.all_planar:
                    # culled rays miss (t inf), so with positive depth
                    # components they can never win the z-buffer: update
                    # only the candidate slots
                    if not cand.size:
                        continue
                    t_cand = ray_box_t(origin, d_world[cand], box)
                    z_cand = t_cand * sec.forward[cand]
                    closer_c = z_cand < depth[cand]
                    if np.any(closer_c):
                        hit = cand[closer_c]
                        depth[hit] = z_cand[closer_c]
                        t_best[hit] = t_cand[closer_c]
                    continue
                else:
                    # culled rays provably miss: inf matches ray_box_t
                    t_box = np.full(len(d_world), np.inf)
                    if cand.size:
                        t_box[cand] = ray_box_t(origin, d_world[cand], box)
                z_box = t_box * sec.forward
                closer = z_box < depth
                depth = np.where(closer, z_box, depth)
                t_best = np.where(closer, t_box, t_best)
            # re-project kept depths through the pixel rays; rays on the
            # image-plane boundary (no finite pixel) fall back to t·dir
            if sec.all_planar:
                # planar rays with a kept hit have finite positive depth;
                # reprojecting just those rows matches the full pass
                kept = np.isfinite(t_best) & (t_best <= self.range)
                rows = np.nonzero(kept)[0]
                depth_k = depth[rows]
                local = np.stack(
                    [depth_k, sec.u[rows] * depth_k, sec.v[rows] * depth_k], axis=1
                )
                if sec.idx is None:
                    pts_sensor[rows] = local @ sec.rot.T
                    t_hit = t_best
                else:
                    pts_sensor[sec.idx[rows]] = local @ sec.rot.T
                    t_hit[sec.idx] = t_best
                continue
            with np.errstate(invalid="ignore"):
                local = np.where(
                    sec.planar[:, None],
                    np.stack([depth, sec.u * depth, sec.v * depth], axis=1),
                    t_best[:, None] * sec.d_sector,
                )
            local[~np.isfinite(t_best)] = 0.0  # misses get culled below
            if sec.idx is None:
                pts_sensor = local @ sec.rot.T
                t_hit = t_best
            else:
                pts_sensor[sec.idx] = local @ sec.rot.T
                t_hit[sec.idx] = t_best

        keep = np.isfinite(t_hit) & (t_hit <= self.range)
        pts = pts_sensor[keep]
        ranges = t_hit[keep]
        if rng is not None and np.any(self.noise_std > 0):
            # draw in bounded chunks so no single RNG call pins the
            # interpreter long enough to disturb a realtime tick loop
            for lo in range(0, len(pts), _NOISE_CHUNK):
                block = pts[lo : lo + _NOISE_CHUNK]
                block += rng.normal(0.0, 1.0, block.shape) * self.noise_std
        intensity = 1.0 / (1.0 + ranges)
        return np.concatenate([pts, intensity[:, None]], axis=1)

    def scan(
        self,
        mount_pose_world: Pose,
        snapshot: Snapshot,
        rng: Optional[np.random.Generator] = None,
        exclude_id: Optional[int] = None,
    ) -> PointCloud:
        xyzi = self.scan_points(mount_pose_world, snapshot, rng, exclude_id)
        return PointCloud(snapshot.sim_time, self.frame_id, pack_points(xyzi))


def _pattern_span(grid: RayGrid) -> float:
    """Effective horizontal fov of a loaded pattern, for sector splitting."""
    if len(grid) == 0:
        return 0.0
    return float(np.degrees(grid.azimuth.max() - grid.azimuth.min()))


def lidar_scan(
    typedef: SensorTypeDef,
    mount_pose_world: Pose,
    snapshot: Snapshot,
    rng: Optional[np.random.Generator] = None,
    frame_id: str = "lidar",
    exclude_id: Optional[int] = None,
) -> PointCloud:
    return LidarModel(typedef, frame_id).scan(
        mount_pose_world, snapshot, rng, exclude_id
    )
