"""Topic measurement, reference-table comparison, and track experiments."""
from __future__ import annotations

import json
import math
import statistics
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hilsim.actuation import CONTROL_TOPIC, ControlLimits
from hilsim.bus import Bus, Reliability, TopicSpec
from hilsim.harness import (
    DEFAULT_TOLERANCE_PCT,
    LOOKAHEAD_M,
    TARGET_SPEED,
    WHEELBASE,
    LoopPath,
    MetricsRecord,
    NoData,
    NoLoop,
    PurePursuitFollower,
    ReferenceEntry,
    compare_report,
    load_reference_table,
    measure_topic,
    packaged_reference_table,
    period_stats,
    render_report,
    run_track_experiment,
    stats_from_log,
)
from hilsim.road import Lane, RoadNetwork
from hilsim.sensors import (
    Image,
    PointCloud,
    encode_image,
    encode_pointcloud,
    packaged_light_types_path,
)
from hilsim.server import ServerConfig

MAP = str(Path(__file__).parent.parent / "src/hilsim/data/maps/block_loop.json")
SCENARIOS = Path(__file__).parent.parent / "src/hilsim/data/scenarios"
CAMERA_TOPIC = "/edgar/sensor/camera/front/image_resized"


# -- period statistics -----------------------------------------------------------


def test_period_stats_hand_computed():
    # diffs of [0, 50, 100, 160] ms are [50, 50, 60]
    mean, stddev, p99 = period_stats([0.0, 0.05, 0.10, 0.16])
    assert mean == pytest.approx(160.0 / 3.0, rel=1e-9)
    assert stddev == pytest.approx(10.0 * math.sqrt(2.0) / 3.0, rel=1e-9)
    # p99 by linear interpolation over sorted [50, 50, 60]:
    # rank (3-1)*0.99 = 1.98 -> 50 + 0.98 * 10
    assert p99 == pytest.approx(59.8, rel=1e-9)


def test_period_stats_matches_independent_recompute():
    stamps = [0.0, 0.051, 0.098, 0.153, 0.199, 0.252]
    diffs = [(b - a) * 1000.0 for a, b in zip(stamps, stamps[1:])]
    mean, stddev, p99 = period_stats(stamps)
    assert mean == pytest.approx(statistics.fmean(diffs), rel=1e-12)
    assert stddev == pytest.approx(statistics.pstdev(diffs), rel=1e-12)
    ranked = sorted(diffs)
    rank = (len(ranked) - 1) * 0.99
    lo = math.floor(rank)
    expected_p99 = ranked[lo] + (rank - lo) * (ranked[lo + 1] - ranked[lo])
    assert p99 == pytest.approx(expected_p99, rel=1e-12)


def test_period_stats_uniform_grid():
    mean, stddev, p99 = period_stats([i * 0.05 for i in range(101)])
    assert mean == pytest.approx(50.0, rel=1e-9)
    assert stddev == pytest.approx(0.0, abs=1e-9)
    assert p99 == pytest.approx(50.0, rel=1e-9)


# -- record construction ---------------------------------------------------------


def test_stats_from_log_empty_raises():
    with pytest.raises(NoData):
        stats_from_log("/t", [])


def test_stats_from_log_single_sample_has_no_periods():
    rec = stats_from_log("/t", [(1.5, 240)])
    assert rec.sample_count == 1
    assert rec.mean_period_ms is None
    assert rec.stddev_period_ms is None
    assert rec.p99_period_ms is None
    assert rec.mean_payload_bytes == 240.0
    assert rec.resolution is None
    assert rec.drops == 0


def test_stats_from_log_image_resolution():
    payload = encode_image(Image(0.0, "cam_front", 8, 6, bytes(8 * 6 * 3)))
    rec = stats_from_log("/t", [(0.0, len(payload)), (0.05, len(payload))], payload)
    assert rec.resolution == 48


def test_stats_from_log_pointcloud_resolution():
    payload = encode_pointcloud(PointCloud(0.0, "lidar_top", bytes(5 * 16)))
    rec = stats_from_log("/t", [(0.0, len(payload))], payload)
    assert rec.resolution == 5


def test_stats_from_log_opaque_payload_has_no_resolution():
    rec = stats_from_log("/t", [(0.0, 3)], b"{}\n")
    assert rec.resolution is None


def test_stats_from_log_carries_drops_and_serializes():
    rec = stats_from_log("/t", [(0.0, 10), (0.1, 30)], drops=7)
    assert rec.drops == 7
    assert rec.mean_payload_bytes == 20.0
    doc = rec.to_json()
    assert doc["topic"] == "/t"
    assert doc["sample_count"] == 2
    assert doc["mean_period_ms"] == pytest.approx(100.0)
    assert doc["drops"] == 7


# -- live measurement ------------------------------------------------------------


@pytest.fixture
def bus():
    b = Bus()
    yield b
    b.close()


def _publish_when_subscribed(bus, topic, stamps, payload=b"x" * 24, pace_s=0.0):
    """Background publisher that waits for the measurement tap to attach."""
    pub = bus.advertise(TopicSpec(topic, Reliability.BEST_EFFORT, 256))

    def run():
        deadline = time.monotonic() + 5.0
        while bus.subscriber_count(topic) == 0:
            if time.monotonic() > deadline:
                return
            time.sleep(0.001)
        for stamp in stamps:
            pub.publish(stamp, payload)
            if pace_s:
                time.sleep(pace_s)

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread


def test_measure_topic_requires_a_window(bus):
    with pytest.raises(ValueError):
        measure_topic(bus, "/t")


def test_measure_topic_sample_target(bus):
    stamps = [i * 0.05 for i in range(30)]
    thread = _publish_when_subscribed(bus, "/t", stamps, pace_s=0.001)
    rec = measure_topic(bus, "/t", sample_target=20)
    thread.join(timeout=5.0)
    assert rec.sample_count == 20
    assert rec.mean_period_ms == pytest.approx(50.0, rel=1e-9)
    assert rec.stddev_period_ms == pytest.approx(0.0, abs=1e-9)
    assert rec.mean_payload_bytes == 24.0
    assert rec.drops == 0
    # the tap is gone once the window closes
    assert bus.subscriber_count("/t") == 0


def test_measure_topic_idle_timeout_raises_no_data(bus):
    bus.advertise(TopicSpec("/quiet", Reliability.BEST_EFFORT, 8))
    start = time.monotonic()
    with pytest.raises(NoData):
        measure_topic(bus, "/quiet", duration_s=30.0, idle_timeout_s=0.2)
    assert time.monotonic() - start < 5.0  # idle cutoff, not the full window


def test_measure_topic_accounts_for_every_message(bus):
    # a burst far beyond queue depth: whatever the tap cannot hold is
    # counted as drops, and received + dropped covers the whole burst
    stamps = [i * 0.01 for i in range(400)]
    thread = _publish_when_subscribed(bus, "/burst", stamps)
    rec = measure_topic(bus, "/burst", duration_s=30.0, idle_timeout_s=0.5)
    thread.join(timeout=5.0)
    assert rec.sample_count + rec.drops == 400
    assert rec.sample_count >= 256  # queue depth is always available


# -- reference table -------------------------------------------------------------


def test_reference_entry_round_trip():
    entry = ReferenceEntry(
        sensor="camera_front",
        topic="/edgar/sensor/camera/front/image_resized",
        expected_period_ms=50.0,
        expected_payload_bytes=1_400_000.0,
        tolerance_pct=5.0,
        vehicle_period_ms=50.0,
        vehicle_payload_bytes=1_400_000.0,
    )
    assert ReferenceEntry.from_json(entry.to_json()) == entry


def test_reference_entry_defaults():
    entry = ReferenceEntry.from_json(
        {"sensor": "gnss", "topic": "/fix", "expected_period_ms": 100.0}
    )
    assert entry.tolerance_pct == DEFAULT_TOLERANCE_PCT
    assert entry.expected_payload_bytes is None
    assert entry.vehicle_period_ms is None
    assert entry.vehicle_payload_bytes is None


@pytest.mark.parametrize("period", [0.0, -50.0])
def test_reference_entry_rejects_bad_period(period):
    with pytest.raises(ValueError):
        ReferenceEntry(sensor="s", topic="/t", expected_period_ms=period)


def test_reference_entry_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        ReferenceEntry(sensor="s", topic="/t", expected_period_ms=50.0, tolerance_pct=0.0)


def test_packaged_reference_table_is_sound():
    rows = load_reference_table(packaged_reference_table())
    assert len(rows) == 8
    topics = [r.topic for r in rows]
    assert len(set(topics)) == len(topics)
    for row in rows:
        assert row.expected_period_ms in (50.0, 100.0)
        assert row.tolerance_pct == DEFAULT_TOLERANCE_PCT
        # every row carries the matching on-vehicle figures for the report
        assert row.vehicle_period_ms is not None
        assert row.vehicle_payload_bytes is not None


# -- comparison report -----------------------------------------------------------


def _rec(topic, mean_ms, payload=100.0, count=100):
    return MetricsRecord(
        topic=topic,
        sample_count=count,
        mean_period_ms=mean_ms,
        stddev_period_ms=0.0,
        p99_period_ms=mean_ms,
        mean_payload_bytes=payload,
        resolution=None,
    )


def _ref(topic, period_ms, sensor="s", tol=10.0):
    return ReferenceEntry(
        sensor=sensor, topic=topic, expected_period_ms=period_ms, tolerance_pct=tol
    )


def test_compare_report_pass_and_fail_verdicts():
    records = [_rec("/a", 50.0), _rec("/b", 91.0), _rec("/c", 112.0)]
    reference = [_ref("/a", 50.0), _ref("/b", 100.0), _ref("/c", 100.0)]
    report = compare_report(records, reference)
    verdicts = {row["topic"]: row["verdict"] for row in report["rows"]}
    assert verdicts == {"/a": "pass", "/b": "pass", "/c": "fail"}
    deviations = {row["topic"]: row["deviation_pct"] for row in report["rows"]}
    assert deviations["/a"] == pytest.approx(0.0)
    assert deviations["/b"] == pytest.approx(9.0)
    assert deviations["/c"] == pytest.approx(12.0)
    assert report["overall_pass"] is False
    assert report["uncovered"] == []


def test_compare_report_missing_row_fails_overall():
    report = compare_report([_rec("/a", 50.0)], [_ref("/a", 50.0), _ref("/gone", 100.0)])
    by_topic = {row["topic"]: row for row in report["rows"]}
    assert by_topic["/gone"]["verdict"] == "missing"
    assert by_topic["/gone"]["measured_period_ms"] is None
    assert by_topic["/gone"]["deviation_pct"] is None
    assert report["overall_pass"] is False


def test_compare_report_single_sample_counts_as_missing():
    # one message yields no period, so the row cannot be judged
    report = compare_report([_rec("/a", None, count=1)], [_ref("/a", 50.0)])
    assert report["rows"][0]["verdict"] == "missing"
    assert report["overall_pass"] is False


def test_compare_report_lists_unreferenced_topics():
    report = compare_report(
        [_rec("/a", 50.0), _rec("/extra", 10.0)], [_ref("/a", 50.0)]
    )
    assert report["overall_pass"] is True  # extras inform, never fail
    assert [row["topic"] for row in report["uncovered"]] == ["/extra"]
    assert report["uncovered"][0]["verdict"] == "uncovered"
    # a referenced topic is consumed by its row, never double-listed
    assert all(row["topic"] != "/a" for row in report["uncovered"])


def test_compare_report_respects_row_tolerance():
    report = compare_report(
        [_rec("/a", 58.0)], [_ref("/a", 50.0, tol=20.0)]
    )
    assert report["rows"][0]["verdict"] == "pass"
    assert compare_report([_rec("/a", 58.0)], [_ref("/a", 50.0)])["overall_pass"] is False


def test_render_report_text_table():
    report = compare_report(
        [_rec("/a", 50.0)],
        [_ref("/a", 50.0, sensor="cam"), _ref("/gone", 100.0, sensor="gnss")],
    )
    text = render_report(report)
    lines = text.splitlines()
    assert "sensor" in lines[0] and "verdict" in lines[0]
    assert any("cam" in line and "pass" in line for line in lines)
    assert any("gnss" in line and "missing" in line and "—" in line for line in lines)
    assert lines[-1] == "overall: FAIL"
    passing = render_report(compare_report([_rec("/a", 50.0)], [_ref("/a", 50.0)]))
    assert passing.splitlines()[-1] == "overall: PASS"


# -- loop path geometry ----------------------------------------------------------


SQUARE = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]


@pytest.fixture
def square_path():
    return LoopPath(np.array(SQUARE))


def test_loop_path_length_and_cumulative_arcs(square_path):
    assert square_path.length == pytest.approx(40.0)
    assert np.allclose(square_path.cum_s, [0.0, 10.0, 20.0, 30.0, 40.0])


def test_loop_path_drops_consecutive_duplicates():
    path = LoopPath(
        np.array(
            [(0, 0), (0, 0), (10, 0), (10, 0), (10, 10), (0, 10), (0, 10)],
            dtype=float,
        )
    )
    assert path.points.shape == (4, 2)
    assert path.length == pytest.approx(40.0)


@pytest.mark.parametrize(
    "query, expected_s, expected_d",
    [
        ((5.0, -3.0), 5.0, 3.0),  # below the bottom edge
        ((12.0, 5.0), 15.0, 2.0),  # right of the right edge
        ((5.0, 5.0), 5.0, 5.0),  # center: equidistant, first edge wins
        ((-1.0, -1.0), 0.0, math.sqrt(2.0)),  # outside the first corner
    ],
)
def test_loop_path_projection_oracles(square_path, query, expected_s, expected_d):
    s, d = square_path.project(*query)
    assert s == pytest.approx(expected_s, abs=1e-12)
    assert d == pytest.approx(expected_d, abs=1e-12)


@pytest.mark.parametrize(
    "s, expected",
    [
        (0.0, (0.0, 0.0)),
        (5.0, (5.0, 0.0)),
        (15.0, (10.0, 5.0)),
        (25.0, (5.0, 10.0)),
        (40.0, (0.0, 0.0)),  # wraps
        (45.0, (5.0, 0.0)),
        (-5.0, (0.0, 5.0)),  # negative arc length wraps backward
    ],
)
def test_loop_path_point_at_oracles(square_path, s, expected):
    assert square_path.point_at(s) == pytest.approx(expected, abs=1e-12)


@given(st.floats(min_value=0.0, max_value=40.0, exclude_max=True))
def test_loop_path_point_project_round_trip(s):
    path = LoopPath(np.array(SQUARE))
    x, y = path.point_at(s)
    s_back, d = path.project(x, y)
    assert d == pytest.approx(0.0, abs=1e-9)
    assert s_back % path.length == pytest.approx(s % path.length, abs=1e-9)


def test_loop_path_from_road_concatenates_lane_centerlines():
    lanes = [
        Lane(0, 4.0, [(0, 0, 0), (10, 0, 0), (10, 10, 0)], successors=(1,)),
        Lane(1, 4.0, [(10, 10, 0), (0, 10, 0), (0, 0, 0)], successors=(0,)),
    ]
    path = LoopPath.from_road(RoadNetwork(lanes), [0, 1])
    assert path.length == pytest.approx(40.0)
    s, d = path.project(5.0, -1.0)
    assert (s, d) == pytest.approx((5.0, 1.0))


# -- pure pursuit ----------------------------------------------------------------


def test_pure_pursuit_steering_oracle(square_path):
    follower = PurePursuitFollower(square_path)
    # 2 m left of the loop origin, facing along the first edge: the
    # lookahead target sits at (6, 0), giving alpha = atan2(2, 6)
    cmd = follower.command(0.0, -2.0, 0.0, TARGET_SPEED, t=1.25)
    ld = math.hypot(6.0, 2.0)
    alpha = math.atan2(2.0, 6.0)
    expected = math.atan(WHEELBASE * 2.0 * math.sin(alpha) / ld)
    assert cmd.target_steer == pytest.approx(expected, rel=1e-12)
    assert cmd.target_steer == pytest.approx(math.atan(0.32), rel=1e-12)
    assert cmd.target_accel == pytest.approx(0.0, abs=1e-12)  # already at speed
    assert cmd.stamp == 1.25


def test_pure_pursuit_clamps_steering():
    path = LoopPath(np.array(SQUARE))
    follower = PurePursuitFollower(path)
    # on the path but facing 90 degrees off: raw steer exceeds the limit
    cmd = follower.command(0.0, 0.0, math.pi / 2.0, TARGET_SPEED, t=0.0)
    assert cmd.target_steer == -ControlLimits().max_steer
    tight = PurePursuitFollower(path, limits=ControlLimits(max_steer=0.2))
    assert tight.command(0.0, 0.0, math.pi / 2.0, TARGET_SPEED, 0.0).target_steer == -0.2


def test_pure_pursuit_clamps_acceleration(square_path):
    follower = PurePursuitFollower(square_path)
    limits = ControlLimits()
    stopped = follower.command(0.0, 0.0, 0.0, 0.0, 0.0)
    assert stopped.target_accel == limits.accel_max
    speeding = follower.command(0.0, 0.0, 0.0, 20.0, 0.0)
    assert speeding.target_accel == limits.accel_min


def test_pure_pursuit_uses_lookahead_distance(square_path):
    # a shorter lookahead turns harder toward the same offset path
    near = PurePursuitFollower(square_path, lookahead=3.0)
    far = PurePursuitFollower(square_path, lookahead=LOOKAHEAD_M)
    steer_near = near.command(0.0, -2.0, 0.0, TARGET_SPEED, 0.0).target_steer
    steer_far = far.command(0.0, -2.0, 0.0, TARGET_SPEED, 0.0).target_steer
    assert steer_near > steer_far > 0.0


# -- track experiments -----------------------------------------------------------


def _experiment_config():
    return ServerConfig(
        map_path=MAP, mode="fast", sensor_types=packaged_light_types_path()
    )


def test_track_experiment_rejects_bad_arguments(tmp_path):
    cfg = _experiment_config()
    with pytest.raises(ValueError, match="laps"):
        run_track_experiment(cfg, [SCENARIOS / "empty.json"], laps=0, out_dir=tmp_path)
    with pytest.raises(ValueError, match="scenario"):
        run_track_experiment(cfg, [], laps=1, out_dir=tmp_path)


def test_track_experiment_requires_a_lane_loop(tmp_path):
    # a single open lane has no cycle to drive
    road = RoadNetwork([Lane(0, 4.0, [(0, 0, 0), (50, 0, 0)])])
    map_path = tmp_path / "straight.json"
    road.save(map_path)
    cfg = ServerConfig(
        map_path=str(map_path), mode="fast", sensor_types=packaged_light_types_path()
    )
    with pytest.raises(NoLoop):
        run_track_experiment(cfg, [SCENARIOS / "empty.json"], laps=1, out_dir=tmp_path)


def test_track_experiment_report_and_logs(tmp_path):
    report = run_track_experiment(
        _experiment_config(),
        [SCENARIOS / "empty.json"],
        laps=1,
        out_dir=tmp_path,
        max_ticks_per_lap=240,
    )
    assert report["laps"] == 1
    assert report["loop_length_m"] > 0.0
    (result,) = report["scenarios"]
    assert result["scenario"] == "empty"
    assert result["ticks"] == 240  # capped before finishing the lap
    assert result["completed"] is False
    assert result["overruns"] == 0  # fast mode has no deadlines to miss
    assert 0.0 <= result["cross_track_mean_m"] <= result["cross_track_max_m"] < 5.0

    log_path = Path(result["trajectory_log"])
    assert log_path.parent == tmp_path
    lines = log_path.read_text().splitlines()
    assert len(lines) == result["ticks"]
    first = json.loads(lines[0])
    assert set(first) == {"t", "x", "y", "yaw", "v", "s", "cross_track_m", "lap"}
    stamps = [json.loads(line)["t"] for line in lines]
    assert stamps[0] == pytest.approx(0.10)  # one priming tick before logging
    assert np.allclose(np.diff(stamps), 0.05)
    speeds = [json.loads(line)["v"] for line in lines]
    assert max(speeds) > 3.0  # the follower actually drives

    # per-topic statistics cover the sensor kit, the clock, and our commands
    topics = result["topics"]
    assert topics[CAMERA_TOPIC]["mean_period_ms"] == pytest.approx(50.0, rel=0.1)
    assert topics["/clock"]["mean_period_ms"] == pytest.approx(50.0, rel=1e-6)
    assert topics[CONTROL_TOPIC]["sample_count"] == 240
    for record in topics.values():
        assert record["drops"] == 0

    # the written report round-trips to exactly what was returned
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == json.loads(json.dumps(report))


def test_track_experiment_is_deterministic(tmp_path):
    logs = []
    for run in ("first", "second"):
        out = tmp_path / run
        report = run_track_experiment(
            _experiment_config(),
            [SCENARIOS / "empty.json"],
            laps=1,
            out_dir=out,
            max_ticks_per_lap=200,
        )
        logs.append(Path(report["scenarios"][0]["trajectory_log"]).read_bytes())
    assert logs[0] == logs[1]


def test_track_experiment_compares_scenarios(tmp_path):
    report = run_track_experiment(
        _experiment_config(),
        [SCENARIOS / "empty.json", SCENARIOS / "traffic.json"],
        laps=1,
        out_dir=tmp_path,
        max_ticks_per_lap=120,
    )
    assert [r["scenario"] for r in report["scenarios"]] == ["empty", "traffic"]
    comparison = report["trajectory_comparison"]["traffic"]
    assert comparison["vs"] == "empty"
    assert 0.0 <= comparison["mean_deviation_m"] <= comparison["max_deviation_m"]
    assert (tmp_path / "empty.ndjson").exists()
    assert (tmp_path / "traffic.ndjson").exists()
