"""Lane-graph road network: the canonical JSON map format and its queries.

A map is a set of lanes, each a centerline polyline with a width and a list
of successor lanes, plus optional crosswalk/sidewalk polylines.  This is a
deliberately small stand-in for a full road description format: enough
structure to orient spawns, route traffic agents, and ground predictions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose


class RoadError(Exception):
    pass


class EmptyRoad(RoadError):
    pass


class UnknownLane(RoadError):
    pass


@dataclass
class Lane:
    lane_id: int
    width: float
    centerline: np.ndarray  # (N, 3) float64, N >= 2
    successors: tuple[int, ...] = ()
    # cumulative arc length per vertex, cum_s[0] == 0
    cum_s: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float).reshape(-1, 3)
        if self.centerline.shape[0] < 2:
            raise RoadError(f"lane {self.lane_id}: centerline needs >= 2 points")
        if not self.width > 0:
            raise RoadError(f"lane {self.lane_id}: width must be > 0")
        seg = np.diff(self.centerline, axis=0)
        self.cum_s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def pose_at(self, s: float) -> Pose:
        """Interpolated pose at arc length s (clamped to [0, length])."""
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum_s, s, side="right") - 1)
        i = min(i, len(self.cum_s) - 2)
        seg_len = self.cum_s[i + 1] - self.cum_s[i]
        t = 0.0 if seg_len == 0 else (s - self.cum_s[i]) / seg_len
        p = self.centerline[i] + t * (self.centerline[i + 1] - self.centerline[i])
        d = self.centerline[i + 1] - self.centerline[i]
        yaw = math.atan2(d[1], d[0])
        return Pose(p[0], p[1], p[2], yaw=yaw)


class RoadNetwork:
    def __init__(self, lanes: list[Lane], crosswalks: list[np.ndarray] | None = None):
        self.lanes: dict[int, Lane] = {}
        for lane in lanes:
            if lane.lane_id in self.lanes:
                raise RoadError(f"duplicate lane id {lane.lane_id}")
            self.lanes[lane.lane_id] = lane
        for lane in lanes:
            for succ in lane.successors:
                if succ not in self.lanes:
                    raise RoadError(f"lane {lane.lane_id}: dangling successor {succ}")
        self.crosswalks = [np.asarray(c, dtype=float).reshape(-1, 3) for c in (crosswalks or [])]

    def __len__(self) -> int:
        return len(self.lanes)

    def lane(self, lane_id: int) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise UnknownLane(f"no lane {lane_id}") from None

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) over all lane centerlines."""
        if not self.lanes:
            raise EmptyRoad("road network has no lanes")
        pts = np.vstack([lane.centerline[:, :2] for lane in self.lanes.values()])
        return (
            float(pts[:, 0].min()),
            float(pts[:, 1].min()),
            float(pts[:, 0].max()),
            float(pts[:, 1].max()),
        )

    def to_json(self) -> dict:
        return {
            "lanes": [
                {
                    "id": lane.lane_id,
                    "width": lane.width,
                    "centerline": lane.centerline.tolist(),
                    "successors": list(lane.successors),
                }
                for lane in self.lanes.values()
            ],
            "crosswalks": [c.tolist() for c in self.crosswalks],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RoadNetwork":
        lanes = [
            Lane(
                lane_id=int(entry["id"]),
                width=float(entry["width"]),
                centerline=entry["centerline"],
                successors=tuple(int(s) for s in entry.get("successors", [])),
            )
            for entry in doc.get("lanes", [])
        ]
        return cls(lanes, crosswalks=doc.get("crosswalks", []))

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _project_to_segments(points: np.ndarray, q: np.ndarray):
    """Per-segment closest point to q. Returns (dists, ts, feet)."""
    a = points[:-1]
    b = points[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom == 0.0, 1.0, denom)
    t = np.clip(np.einsum("ij,ij->i", q - a, ab) / denom, 0.0, 1.0)
    feet = a + t[:, None] * ab
    dists = np.linalg.norm(feet - q, axis=1)
    return dists, t, feet


def nearest_road_point(road: RoadNetwork, position) -> Pose:
    """Closest centerline point to `position`, oriented along the lane tangent.

    Ties across lanes go to the lowest lane id; at a shared polyline vertex
    the tangent of the following segment wins.
    """
    if not road.lanes:
        raise EmptyRoad("road network has no lanes")
    q = np.zeros(3)
    q[: len(position)] = np.asarray(position, dtype=float)[:3]

    best = None  # (dist, lane_id, seg_idx, t, foot)
    for lane_id in sorted(road.lanes):
        lane = road.lanes[lane_id]
        dists, ts, feet = _project_to_segments(lane.centerline, q)
        order = np.argsort(dists, kind="stable")
        i = int(order[0])
        d = float(dists[i])
        # prefer the following segment when the foot sits on a shared vertex
        for j in order[1:]:
            if dists[j] > d + 1e-12:
                break
            if ts[j] < 1.0 and (ts[i] >= 1.0 or j > i):
                i = int(j)
        if best is None or d < best[0] - 1e-12:
            best = (d, lane_id, i, float(ts[i]), feet[i])

    _, lane_id, i, _, foot = best
    lane = road.lanes[lane_id]
    d = lane.centerline[i + 1] - lane.centerline[i]
    yaw = math.atan2(d[1], d[0])
    return Pose(foot[0], foot[1], foot[2], yaw=yaw)


def nearest_lane(road: RoadNetwork, position) -> tuple[int, float]:
    """(lane_id, arc length) of the closest centerline point to `position`."""
    if not road.lanes:
        raise EmptyRoad("road network has no lanes")
    q = np.zeros(3)
    q[: len(position)] = np.asarray(position, dtype=float)[:3]
    best = None
    for lane_id in sorted(road.lanes):
        lane = road.lanes[lane_id]
        dists, ts, _ = _project_to_segments(lane.centerline, q)
        i = int(np.argmin(dists))
        d = float(dists[i])
        if best is None or d < best[0] - 1e-12:
            s = float(lane.cum_s[i] + ts[i] * (lane.cum_s[i + 1] - lane.cum_s[i]))
            best = (d, lane_id, s)
    return best[1], best[2]


def route_waypoints(
    road: RoadNetwork,
    from_lane: int,
    spacing: float,
    horizon: float,
    seed: int,
    start_s: float = 0.0,
) -> list[Pose]:
    """Poses every `spacing` meters along successive centerlines.

    Successors at branches are chosen by a RNG seeded with `seed`; the walk
    truncates silently at dead-ends.  Poses run from arc length 0 (relative
    to `start_s` on the first lane) out to `horizon` inclusive.
    """
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    import random

    rng = random.Random(seed)
    lane = road.lane(from_lane)
    poses: list[Pose] = []
    s_next = 0.0  # next emission point, measured along the chained route
    consumed = -start_s  # route arc length at the start of the current lane
    while s_next <= horizon + 1e-9:
        local_s = s_next - consumed
        if local_s > lane.length + 1e-9:
            choices = sorted(lane.successors)
            if not choices:
                break
            consumed += lane.length
            lane = road.lane(choices[rng.randrange(len(choices))] if len(choices) > 1 else choices[0])
            continue
        poses.append(lane.pose_at(local_s))
        s_next += spacing
    return poses


def find_lane_loop(road: RoadNetwork, min_length: float = 0.0) -> list[int] | None:
    """First cycle in the lane successor graph of at least `min_length`, or None."""
    for start in sorted(road.lanes):
        path: list[int] = [start]
        seen = {start}
        lane_id = start
        while True:
            succs = sorted(road.lanes[lane_id].successors)
            if not succs:
                break
            lane_id = succs[0]
            if lane_id == start:
                total = sum(road.lanes[i].length for i in path)
                if total >= min_length:
                    return path
                break
            if lane_id in seen:
                break
            seen.add(lane_id)
            path.append(lane_id)
    return None
