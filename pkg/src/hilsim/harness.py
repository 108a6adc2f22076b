"""Measurement and experiment harness: topic statistics, reference-table
comparison, and repeated-lap track experiments.

Topic cadence is measured from envelope stamps (simulated time), so results
are identical in fast and realtime modes and immune to observer scheduling:
subscribing a recorder cannot perturb what it measures.  Subscriptions are
always best-effort with drops counted separately, so a slow reader biases
the drop counter, never the period statistics.

``run_track_experiment`` closes the loop without an external driving stack:
a built-in pure-pursuit follower (6 m lookahead, 5 m/s target speed) chases
the map's lane loop and issues control commands over the bus, while the
harness logs the executed trajectory as newline-delimited JSON and collects
per-topic statistics, tick overruns, and cross-track deviation per scenario.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .actuation import CONTROL_TOPIC, ControlCommand, ControlLimits, encode_command
from .bus import Reliability, TopicSpec
from .road import find_lane_loop
from .sensors import decode_image, decode_pointcloud

DEFAULT_TOLERANCE_PCT = 10.0
LOOKAHEAD_M = 6.0
TARGET_SPEED = 5.0  # m/s
WHEELBASE = 3.2  # m, matches the actuator default


class HarnessError(Exception):
    pass


class NoData(HarnessError):
    """Measurement window closed with zero messages on the topic."""


class NoLoop(HarnessError):
    """The map's lane successor graph has no cycle to drive."""


# -- metrics -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class MetricsRecord:
    topic: str
    sample_count: int
    mean_period_ms: Optional[float]  # None when fewer than 2 samples
    stddev_period_ms: Optional[float]
    p99_period_ms: Optional[float]
    mean_payload_bytes: float
    resolution: Optional[int]  # pixels or points, when decodable
    drops: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def period_stats(stamps_s: Sequence[float]) -> tuple[float, float, float]:
    """(mean, stddev, p99) inter-arrival in ms — the offline recomputation."""
    diffs = np.diff(np.asarray(stamps_s, dtype=float)) * 1000.0
    return (
        float(np.mean(diffs)),
        float(np.std(diffs)),
        float(np.percentile(diffs, 99)),
    )


def payload_resolution(payload: bytes) -> Optional[int]:
    """Pixels for an image payload, points for a cloud, None otherwise."""
    try:
        return decode_pointcloud(payload).count
    except Exception:
        pass
    try:
        img = decode_image(payload)
        return img.width * img.height
    except Exception:
        return None


def stats_from_log(topic: str, samples: Sequence[tuple[float, int]],
                   first_payload: Optional[bytes] = None, drops: int = 0) -> MetricsRecord:
    """Build a MetricsRecord from a raw (stamp, payload size) log."""
    if not samples:
        raise NoData(f"no messages recorded on {topic}")
    mean = stddev = p99 = None
    if len(samples) >= 2:
        mean, stddev, p99 = period_stats([s for s, _ in samples])
    return MetricsRecord(
        topic=topic,
        sample_count=len(samples),
        mean_period_ms=mean,
        stddev_period_ms=stddev,
        p99_period_ms=p99,
        mean_payload_bytes=float(np.mean([n for _, n in samples])),
        resolution=payload_resolution(first_payload) if first_payload else None,
        drops=drops,
    )


def measure_topic(
    bus,
    topic: str,
    *,
    duration_s: Optional[float] = None,
    sample_target: Optional[int] = None,
    idle_timeout_s: float = 2.0,
) -> MetricsRecord:
    """Record the topic until the window closes; see module docstring.

    ``bus`` is anything with ``subscribe`` — the in-process bus or a TCP
    client.  The window closes at ``sample_target`` messages, at
    ``duration_s`` of wall time, or after ``idle_timeout_s`` with nothing
    arriving; zero messages raise :class:`NoData`.
    """
    if duration_s is None and sample_target is None:
        raise ValueError("need duration_s or sample_target")
    sub = bus.subscribe(topic, Reliability.BEST_EFFORT, 256)
    samples: list[tuple[float, int]] = []
    first_payload: Optional[bytes] = None
    start = time.monotonic()
    last_rx = start
    try:
        while True:
            now = time.monotonic()
            if sample_target is not None and len(samples) >= sample_target:
                break
            if duration_s is not None and now - start >= duration_s:
                break
            if now - last_rx >= idle_timeout_s:
                break
            env = sub.recv(timeout=0.05)
            if env is None:
                continue
            last_rx = time.monotonic()
            if first_payload is None:
                first_payload = env.payload
            samples.append((env.stamp, len(env.payload)))
        drops = sub.drops
    finally:
        sub.close()
    if not samples:
        raise NoData(f"no messages on {topic} within the window")
    return stats_from_log(topic, samples, first_payload, drops)


# -- reference comparison --------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ReferenceEntry:
    sensor: str
    topic: str
    expected_period_ms: float
    expected_payload_bytes: Optional[float] = None  # informational only
    tolerance_pct: float = DEFAULT_TOLERANCE_PCT
    # the matching physical sensor's cadence and message size on the
    # real vehicle bus, for side-by-side reporting; never judged
    vehicle_period_ms: Optional[float] = None
    vehicle_payload_bytes: Optional[float] = None

    def __post_init__(self):
        if not self.expected_period_ms > 0:
            raise ValueError(
                f"{self.sensor}: expected period must be > 0, got {self.expected_period_ms}"
            )
        if not self.tolerance_pct > 0:
            raise ValueError(f"{self.sensor}: tolerance_pct must be > 0")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ReferenceEntry":
        return cls(
            sensor=doc["sensor"],
            topic=doc["topic"],
            expected_period_ms=doc["expected_period_ms"],
            expected_payload_bytes=doc.get("expected_payload_bytes"),
            tolerance_pct=doc.get("tolerance_pct", DEFAULT_TOLERANCE_PCT),
            vehicle_period_ms=doc.get("vehicle_period_ms"),
            vehicle_payload_bytes=doc.get("vehicle_payload_bytes"),
        )


def load_reference_table(path) -> list[ReferenceEntry]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [ReferenceEntry.from_json(row) for row in doc["rows"]]


def packaged_reference_table() -> str:
    """Path of the reference table shipped with the package."""
    from importlib import resources

    return str(resources.files("hilsim") / "data" / "reference_table.json")


def compare_report(
    records: Sequence[MetricsRecord], reference: Sequence[ReferenceEntry]
) -> dict:
    """Per-row verdicts against the reference table, as a JSON-able dict.

    Reference rows judge the measured mean period at their tolerance;
    payload bytes are carried through informationally.  Measured topics
    without a reference row are listed under ``uncovered``.
    """
    by_topic = {r.topic: r for r in records}
    rows = []
    overall = True
    for ref in reference:
        rec = by_topic.pop(ref.topic, None)
        if rec is None or rec.mean_period_ms is None:
            rows.append(
                {
                    "sensor": ref.sensor,
                    "topic": ref.topic,
                    "expected_period_ms": ref.expected_period_ms,
                    "measured_period_ms": None,
                    "deviation_pct": None,
                    "expected_payload_bytes": ref.expected_payload_bytes,
                    "measured_payload_bytes": None,
                    "verdict": "missing",
                }
            )
            overall = False
            continue
        deviation = (
            abs(rec.mean_period_ms - ref.expected_period_ms)
            / ref.expected_period_ms
            * 100.0
        )
        ok = deviation <= ref.tolerance_pct
        overall = overall and ok
        rows.append(
            {
                "sensor": ref.sensor,
                "topic": ref.topic,
                "expected_period_ms": ref.expected_period_ms,
                "measured_period_ms": rec.mean_period_ms,
                "deviation_pct": deviation,
                "expected_payload_bytes": ref.expected_payload_bytes,
                "measured_payload_bytes": rec.mean_payload_bytes,
                "sample_count": rec.sample_count,
                "verdict": "pass" if ok else "fail",
            }
        )
    uncovered = [
        {
            "topic": rec.topic,
            "measured_period_ms": rec.mean_period_ms,
            "measured_payload_bytes": rec.mean_payload_bytes,
            "verdict": "uncovered",
        }
        for rec in by_topic.values()
    ]
    return {"rows": rows, "uncovered": uncovered, "overall_pass": overall}


def render_report(report: dict) -> str:
    """The comparison as a fixed-width text table."""

    def fmt(value, suffix: str, width: int) -> str:
        if value is None:
            return f"{'—':>{width}}"
        return f"{value:>{width - len(suffix)}.1f}{suffix}"

    header = (
        f"{'sensor':24} {'topic':38} {'expected':>9} {'measured':>9} "
        f"{'dev %':>7} {'verdict':>8}"
    )
    lines = [header, "-" * len(header)]
    for row in report["rows"]:
        lines.append(
            f"{row['sensor']:24} {row['topic']:38} "
            f"{fmt(row['expected_period_ms'], 'ms', 9)} "
            f"{fmt(row['measured_period_ms'], 'ms', 9)} "
            f"{fmt(row['deviation_pct'], '%', 7)} "
            f"{row['verdict']:>8}"
        )
    for row in report["uncovered"]:
        lines.append(
            f"{'(unreferenced)':24} {row['topic']:38} {'—':>9} "
            f"{fmt(row['measured_period_ms'], 'ms', 9)} {'—':>7} "
            f"{row['verdict']:>8}"
        )
    lines.append(f"overall: {'PASS' if report['overall_pass'] else 'FAIL'}")
    return "\n".join(lines)


# -- track experiments -----------------------------------------------------------


class LoopPath:
    """Closed centerline polyline over a lane loop, with arc-length lookup."""

    def __init__(self, points_xy: np.ndarray):
        pts = np.asarray(points_xy, dtype=float)
        keep = [0]
        for i in range(1, len(pts)):
            if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-9:
                keep.append(i)
        self.points = pts[keep]
        closed = np.vstack([self.points, self.points[:1]])
        seg = np.diff(closed, axis=0)
        self._seg_start = closed[:-1]
        self._seg_vec = seg
        self._seg_len = np.linalg.norm(seg, axis=1)
        self.cum_s = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self.length = float(self.cum_s[-1])

    @classmethod
    def from_road(cls, road, loop_lane_ids: Sequence[int]) -> "LoopPath":
        pts = np.vstack(
            [road.lanes[i].centerline[:, :2] for i in loop_lane_ids]
        )
        return cls(pts)

    def project(self, x: float, y: float) -> tuple[float, float]:
        """(arc length, distance) of the closest point on the loop."""
        q = np.array([x, y])
        rel = q - self._seg_start
        denom = np.maximum(self._seg_len**2, 1e-12)
        t = np.clip(np.einsum("ij,ij->i", rel, self._seg_vec) / denom, 0.0, 1.0)
        feet = self._seg_start + t[:, None] * self._seg_vec
        dists = np.linalg.norm(q - feet, axis=1)
        i = int(np.argmin(dists))
        s = float(self.cum_s[i] + t[i] * self._seg_len[i])
        return s, float(dists[i])

    def point_at(self, s: float) -> np.ndarray:
        s = s % self.length
        i = int(np.searchsorted(self.cum_s, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        t = (s - self.cum_s[i]) / max(self._seg_len[i], 1e-12)
        return self._seg_start[i] + t * self._seg_vec[i]


class PurePursuitFollower:
    """Minimal lane follower that closes the loop for experiments."""

    def __init__(
        self,
        path: LoopPath,
        lookahead: float = LOOKAHEAD_M,
        speed: float = TARGET_SPEED,
        wheelbase: float = WHEELBASE,
        limits: ControlLimits = ControlLimits(),
        speed_gain: float = 1.0,
    ):
        self.path = path
        self.lookahead = lookahead
        self.speed = speed
        self.wheelbase = wheelbase
        self.limits = limits
        self.speed_gain = speed_gain

    def command(self, x: float, y: float, yaw: float, v: float, t: float) -> ControlCommand:
        s, _ = self.path.project(x, y)
        target = self.path.point_at(s + self.lookahead)
        dx, dy = target[0] - x, target[1] - y
        local_x = math.cos(yaw) * dx + math.sin(yaw) * dy
        local_y = -math.sin(yaw) * dx + math.cos(yaw) * dy
        ld = max(math.hypot(local_x, local_y), 1e-6)
        alpha = math.atan2(local_y, local_x)
        steer = math.atan(self.wheelbase * 2.0 * math.sin(alpha) / ld)
        steer = max(-self.limits.max_steer, min(self.limits.max_steer, steer))
        accel = self.speed_gain * (self.speed - v)
        accel = max(self.limits.accel_min, min(self.limits.accel_max, accel))
        return ControlCommand(target_steer=steer, target_accel=accel, stamp=t)


class _TopicRecorder:
    """Best-effort taps on every advertised topic, drained between ticks."""

    def __init__(self, bus, topics: Sequence[str]):
        self._subs = {
            t: bus.subscribe(t, Reliability.BEST_EFFORT, 256) for t in topics
        }
        self.samples: dict[str, list[tuple[float, int]]] = {t: [] for t in topics}
        self.first_payload: dict[str, bytes] = {}

    def drain(self) -> None:
        for topic, sub in self._subs.items():
            for env in sub.drain():
                if topic not in self.first_payload:
                    self.first_payload[topic] = env.payload
                self.samples[topic].append((env.stamp, len(env.payload)))

    def records(self) -> dict[str, MetricsRecord]:
        out = {}
        for topic, samples in self.samples.items():
            drops = self._subs[topic].drops
            if samples:
                out[topic] = stats_from_log(
                    topic, samples, self.first_payload.get(topic), drops
                )
        return out

    def close(self) -> None:
        for sub in self._subs.values():
            sub.close()


def run_track_experiment(
    server_cfg,
    scenario_paths: Sequence,
    laps: int,
    out_dir=None,
    max_ticks_per_lap: int = 20_000,
) -> dict:
    """Drive the lane loop under each scenario; write logs and a report.

    Returns the report dict (also saved as ``report.json`` in ``out_dir``):
    per-scenario trajectory log path, tick overruns, per-topic statistics,
    cross-track deviation against the loop centerline, and trajectory
    deviation of every scenario against the first.
    """
    from .server import HiLServer  # deferred: server imports nothing from here

    if laps < 1:
        raise ValueError(f"laps must be >= 1, got {laps}")
    if not scenario_paths:
        raise ValueError("need at least one scenario path")
    if out_dir is None:
        import tempfile

        out_dir = tempfile.mkdtemp(prefix="track-experiment-")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    scenario_results = []
    trajectories: list[np.ndarray] = []
    for scenario_path in scenario_paths:
        cfg = dataclasses.replace(server_cfg, scenario=str(scenario_path))
        server = HiLServer(cfg)
        try:
            loop = find_lane_loop(server.road)
            if loop is None:
                raise NoLoop(f"map {cfg.map_path} has no lane loop to follow")
            path = LoopPath.from_road(server.road, loop)
            follower = PurePursuitFollower(path)
            control_pub = server.bus.advertise(
                TopicSpec(CONTROL_TOPIC, Reliability.RELIABLE, 10)
            )
            recorder = _TopicRecorder(
                server.bus, [spec.name for spec in server.bus.topics()]
            )

            log_path = out_dir / (Path(str(scenario_path)).stem + ".ndjson")
            # prime one tick so the snapshot contains the spawned actors
            snap = server.step()
            recorder.drain()
            ego = snap.actor(server.ego_id)
            start_s, _ = path.project(ego.pose.x, ego.pose.y)
            progress = 0.0
            last_s = start_s
            cross_track: list[float] = []
            points: list[tuple[float, float]] = []
            ticks = 0
            max_ticks = max_ticks_per_lap * laps
            with open(log_path, "w", encoding="utf-8") as log_fh:
                while progress < laps * path.length and ticks < max_ticks:
                    cmd = follower.command(
                        ego.pose.x,
                        ego.pose.y,
                        ego.pose.yaw,
                        ego.speed,
                        server.world.clock.sim_time,
                    )
                    control_pub.publish(cmd.stamp, encode_command(cmd))
                    snap = server.step()
                    recorder.drain()
                    ego = snap.actor(server.ego_id)
                    s, d = path.project(ego.pose.x, ego.pose.y)
                    delta = s - last_s
                    if delta < -path.length / 2:  # wrapped past the origin
                        delta += path.length
                    if delta > 0:
                        progress += delta
                    last_s = s
                    cross_track.append(d)
                    points.append((ego.pose.x, ego.pose.y))
                    log_fh.write(
                        json.dumps(
                            {
                                "t": snap.sim_time,
                                "x": ego.pose.x,
                                "y": ego.pose.y,
                                "yaw": ego.pose.yaw,
                                "v": ego.speed,
                                "s": s,
                                "cross_track_m": d,
                                "lap": int(progress // path.length),
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
                    ticks += 1
            records = recorder.records()
            recorder.close()
            scenario_results.append(
                {
                    "scenario": Path(str(scenario_path)).stem,
                    "completed": progress >= laps * path.length,
                    "ticks": ticks,
                    "sim_time_s": server.world.clock.sim_time,
                    "overruns": len(server.world.overruns),
                    "cross_track_mean_m": float(np.mean(cross_track)),
                    "cross_track_max_m": float(np.max(cross_track)),
                    "trajectory_log": str(log_path),
                    "topics": {t: r.to_json() for t, r in sorted(records.items())},
                }
            )
            trajectories.append(np.array(points))
        finally:
            server.close()

    comparison = {}
    base = trajectories[0]
    for result, traj in zip(scenario_results[1:], trajectories[1:]):
        n = min(len(base), len(traj))
        if n == 0:
            continue
        dists = np.linalg.norm(base[:n] - traj[:n], axis=1)
        comparison[result["scenario"]] = {
            "vs": scenario_results[0]["scenario"],
            "max_deviation_m": float(np.max(dists)),
            "mean_deviation_m": float(np.mean(dists)),
        }

    report = {
        "laps": laps,
        "loop_length_m": float(path.length),  # same map across scenarios
        "scenarios": scenario_results,
        "trajectory_comparison": comparison,
        "report_path": str(out_dir / "report.json"),
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    return report
