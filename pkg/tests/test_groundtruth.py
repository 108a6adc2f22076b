"""Ground-truth streams: detection fidelity, track rings, prediction rules."""
import math

import numpy as np
import pytest

from hilsim.bus import Bus
from hilsim.geom import Pose
from hilsim.groundtruth import (
    DETECTED_TOPIC,
    PREDICTED_TOPIC,
    TRACKED_TOPIC,
    DetectedObject,
    GroundTruthPublisher,
    NonMonotoneStamp,
    ObjectClass,
    PathSource,
    PredictedObject,
    TrackPoint,
    TrackedObject,
    Tracker,
    decode_detected,
    decode_predicted,
    decode_tracked,
    detected_objects,
    encode_detected,
    encode_predicted,
    encode_tracked,
    object_class_of,
    predicted_objects,
)
from hilsim.road import Lane, RoadNetwork, nearest_road_point
from hilsim.world import (
    ActorKind,
    ActorState,
    ManagedBy,
    Snapshot,
    TickMode,
    World,
)

DT = 0.05


def actor_state(
    actor_id,
    kind=ActorKind.VEHICLE,
    pos=(0.0, 0.0, 0.75),
    vel=(0.0, 0.0, 0.0),
    yaw=0.0,
    extent=(2.4, 0.95, 0.75),
):
    return ActorState(
        actor_id=actor_id,
        kind=kind,
        pose=Pose(pos[0], pos[1], pos[2], yaw=yaw),
        velocity=tuple(vel),
        acceleration=(0.0, 0.0, 0.0),
        bbox_extent=tuple(extent),
        managed_by=ManagedBy.NONE,
        yaw_rate=0.0,
    )


def snap(t, actors, tick=None):
    return Snapshot(
        sim_time=t,
        tick_index=int(round(t / DT)) if tick is None else tick,
        actors=tuple(actors),
    )


def straight_road(length=100.0, width=3.5):
    return RoadNetwork([Lane(1, width, [[0, 0, 0], [length, 0, 0]])])


def forked_road():
    """Lane 1 feeds lanes 2 (straight) and 3 (45-degree left)."""
    main = Lane(1, 3.5, [[0, 0, 0], [50, 0, 0]], successors=(2, 3))
    ahead = Lane(2, 3.5, [[50, 0, 0], [150, 0, 0]])
    left = Lane(3, 3.0, [[50, 0, 0], [100, 50, 0]])
    return RoadNetwork([main, ahead, left])


# -- detections ---------------------------------------------------------------


def test_detected_one_per_non_ego_actor():
    actors = [
        actor_state(1, ActorKind.EGO_VEHICLE, pos=(0, 0, 0.75)),
        actor_state(4, ActorKind.VEHICLE, pos=(10, 0, 0.75), vel=(5, 0, 0)),
        actor_state(2, ActorKind.PEDESTRIAN, pos=(3, 4, 0.9), extent=(0.3, 0.3, 0.9)),
        actor_state(7, ActorKind.STATIC_PROP, pos=(-5, 2, 0.5), extent=(0.5, 0.5, 0.5)),
    ]
    out = detected_objects(snap(1.25, actors))
    assert [d.actor_id for d in out] == [2, 4, 7]
    by_id = {d.actor_id: d for d in out}
    assert by_id[4].object_class is ObjectClass.CAR
    assert by_id[2].object_class is ObjectClass.PEDESTRIAN
    assert by_id[7].object_class is ObjectClass.PROP
    assert by_id[4].velocity == (5.0, 0.0, 0.0)
    assert by_id[4].pose == Pose(10, 0, 0.75)
    assert by_id[2].extent == (0.3, 0.3, 0.9)
    assert all(d.stamp == 1.25 for d in out)


def test_detected_empty_world_and_ego_only():
    assert detected_objects(snap(0.0, [])) == []
    only_ego = [actor_state(1, ActorKind.EGO_VEHICLE)]
    assert detected_objects(snap(0.0, only_ego)) == []


def test_detected_set_matches_non_ego_ids_on_random_snapshots():
    rng = np.random.default_rng(7041)
    kinds = list(ActorKind)
    for _ in range(1000):
        n = int(rng.integers(0, 12))
        ids = rng.choice(5000, size=n, replace=False)
        actors = []
        ego_ids = set()
        for i, actor_id in enumerate(ids):
            kind = kinds[int(rng.integers(0, len(kinds)))]
            if kind is ActorKind.EGO_VEHICLE:
                if ego_ids:  # at most one ego per world
                    kind = ActorKind.VEHICLE
                else:
                    ego_ids.add(int(actor_id))
            actors.append(
                actor_state(
                    int(actor_id),
                    kind,
                    pos=rng.uniform(-100, 100, 3),
                    vel=rng.uniform(-10, 10, 3),
                )
            )
        t = float(rng.uniform(0, 1000))
        out = detected_objects(snap(t, actors))
        assert {d.actor_id for d in out} == set(int(i) for i in ids) - ego_ids
        assert all(d.stamp == t for d in out)
        expected_class = {
            a.actor_id: object_class_of(a.kind)
            for a in actors
            if a.actor_id not in ego_ids
        }
        assert {d.actor_id: d.object_class for d in out} == expected_class


# -- tracks -------------------------------------------------------------------


def feed(tracker, ticks, actors_fn, start_tick=1):
    out = []
    for i in range(start_tick, start_tick + ticks):
        t = i * DT
        out = tracker.update(snap(t, actors_fn(t), tick=i))
    return out


def test_track_ring_fills_to_buffer():
    tracker = Tracker(buffer_s=2.0)
    tracks = feed(tracker, 40, lambda t: [actor_state(3, pos=(t, 0, 0.75))])
    assert len(tracks) == 1
    hist = tracks[0].history
    assert len(hist) == 40  # exactly full at buffer/dt entries
    assert hist[0].stamp == pytest.approx(DT)
    assert hist[-1].stamp == pytest.approx(40 * DT)
    assert tracks[0].span == pytest.approx(2.0 - DT)


def test_track_ring_evicts_to_span():
    tracker = Tracker(buffer_s=2.0)
    tracks = feed(tracker, 60, lambda t: [actor_state(3, pos=(t, 0, 0.75))])
    hist = tracks[0].history
    assert len(hist) == 40
    assert hist[-1].stamp == pytest.approx(3.0)
    # span stays within [buffer - dt, buffer]
    assert 2.0 - DT - 1e-9 <= tracks[0].span <= 2.0 + 1e-9
    # newest last, strictly increasing stamps
    stamps = [p.stamp for p in hist]
    assert stamps == sorted(stamps)


def test_track_span_window_holds_while_running():
    tracker = Tracker(buffer_s=2.0)
    for i in range(1, 200):
        t = i * DT
        tracks = tracker.update(snap(t, [actor_state(3, pos=(t, 0, 0.75))], tick=i))
        if i >= 40:
            assert 2.0 - DT - 1e-9 <= tracks[0].span <= 2.0 + 1e-9


def test_track_requires_strictly_increasing_stamps():
    tracker = Tracker()
    tracker.update(snap(0.05, [actor_state(3)]))
    with pytest.raises(NonMonotoneStamp):
        tracker.update(snap(0.05, [actor_state(3)]))
    with pytest.raises(NonMonotoneStamp):
        tracker.update(snap(0.01, [actor_state(3)]))


def test_track_outlives_actor_by_one_buffer_span():
    tracker = Tracker(buffer_s=2.0)
    feed(tracker, 10, lambda t: [actor_state(3, pos=(t, 0, 0.75))])  # seen until t=0.5
    last_seen = 10 * DT
    # keep updating with the actor gone
    present = True
    for i in range(11, 80):
        t = i * DT
        tracks = tracker.update(snap(t, [], tick=i))
        ids = [tr.actor_id for tr in tracks]
        if t - last_seen < 2.0 - DT / 2:
            assert ids == [3], f"track dropped early at t={t}"
        elif t - last_seen >= 2.0:
            present = False
            assert ids == [], f"track outlived grace period at t={t}"
    assert not present


def test_track_includes_ego_and_all_actors():
    tracker = Tracker()
    tracks = feed(
        tracker,
        5,
        lambda t: [
            actor_state(1, ActorKind.EGO_VEHICLE, pos=(t, 0, 0.75)),
            actor_state(2, ActorKind.PEDESTRIAN, pos=(0, t, 0.9)),
        ],
    )
    assert [tr.actor_id for tr in tracks] == [1, 2]
    assert all(len(tr.history) == 5 for tr in tracks)
    assert tracks[0].history[-1].pose.x == pytest.approx(0.25)


# -- predictions ---------------------------------------------------------------


class ScriptedPlan:
    """Plan provider stub that walks +x at 2 m/s from (5, 5)."""

    def predicted_poses(self, start_time, horizon_s, resolution_s):
        steps = int(round((horizon_s + 4.0) / resolution_s))  # overshoots horizon
        return [
            (start_time + k * resolution_s, Pose(5 + 2 * k * resolution_s, 5, 0.75))
            for k in range(steps + 1)
        ]


def test_agent_plan_used_and_truncated_to_horizon():
    actors = [actor_state(9, pos=(5, 5, 0.75), vel=(2, 0, 0))]
    out = predicted_objects(
        snap(10.0, actors), straight_road(), {9: ScriptedPlan()},
        horizon_s=8.0, resolution_s=0.5,
    )
    assert len(out) == 1
    p = out[0]
    assert p.source is PathSource.AGENT_PLAN
    assert len(p.path) == 17  # horizon/resolution + 1, overshoot truncated
    assert p.path[0][0] == pytest.approx(10.0)
    assert p.path[-1][0] == pytest.approx(18.0)
    assert p.path[-1][1].x == pytest.approx(5 + 2 * 8.0)


def test_lane_following_vehicle_17_poses_spaced_5m():
    # vehicle slightly off-center at x=10 moving 10 m/s: 8 s horizon at
    # 0.5 s resolution puts 17 poses on the centerline, 5 m apart
    road = straight_road(length=200.0)
    actors = [actor_state(4, pos=(10.0, 0.4, 0.75), vel=(10, 0, 0))]
    out = predicted_objects(snap(2.0, actors), road)
    (p,) = out
    assert p.source is PathSource.ROAD_WAYPOINTS
    assert len(p.path) == 17
    for k, (stamp, pose) in enumerate(p.path):
        assert stamp == pytest.approx(2.0 + 0.5 * k)
        assert pose.x == pytest.approx(10.0 + 5.0 * k)
        assert pose.y == pytest.approx(0.0)
        assert pose.yaw == pytest.approx(0.0)


def test_lane_following_truncates_at_dead_end():
    road = straight_road(length=30.0)
    actors = [actor_state(4, pos=(10.0, 0.0, 0.75), vel=(10, 0, 0))]
    (p,) = predicted_objects(snap(0.0, actors), road)
    # 20 m of lane left at 5 m spacing: s = 10..30 -> 5 poses
    assert len(p.path) == 5
    assert p.path[-1][1].x == pytest.approx(30.0)


def test_lane_predictions_stay_within_half_lane_width():
    road = forked_road()
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = float(rng.uniform(0, 140))
        y = float(rng.uniform(-1.5, 1.5))
        speed = float(rng.uniform(0.5, 12.0))
        heading = float(rng.uniform(-math.pi, math.pi))
        actors = [
            actor_state(
                5,
                pos=(x, y, 0.75),
                vel=(speed * math.cos(heading), speed * math.sin(heading), 0.0),
            )
        ]
        (p,) = predicted_objects(snap(0.0, actors), road)
        assert p.source is PathSource.ROAD_WAYPOINTS
        max_half_width = max(l.width for l in road.lanes.values()) / 2
        for _, pose in p.path:
            foot = nearest_road_point(road, (pose.x, pose.y))
            dist = math.hypot(pose.x - foot.x, pose.y - foot.y)
            assert dist <= max_half_width + 1e-9
            assert dist <= 1e-9  # waypoints sit exactly on a centerline


def test_stationary_vehicle_predicts_single_pose():
    actors = [actor_state(4, pos=(10, 0.4, 0.75), vel=(0, 0, 0))]
    (p,) = predicted_objects(snap(3.0, actors), straight_road())
    assert p.source is PathSource.STRAIGHT_LINE
    assert p.path == ((3.0, Pose(10, 0.4, 0.75)),)


def test_pedestrian_predicts_straight_line():
    actors = [
        actor_state(
            6, ActorKind.PEDESTRIAN, pos=(0, 0, 0.9), vel=(1.0, 1.0, 0.0),
            extent=(0.3, 0.3, 0.9),
        )
    ]
    (p,) = predicted_objects(snap(0.0, actors), straight_road())
    assert p.source is PathSource.STRAIGHT_LINE
    assert len(p.path) == 17
    stamp, last = p.path[-1]
    assert stamp == pytest.approx(8.0)
    assert (last.x, last.y) == (pytest.approx(8.0), pytest.approx(8.0))
    assert last.yaw == pytest.approx(math.pi / 4)


def test_prop_and_stationary_pedestrian_predict_single_pose():
    actors = [
        actor_state(2, ActorKind.STATIC_PROP, pos=(5, 5, 0.5), extent=(0.5, 0.5, 0.5)),
        actor_state(3, ActorKind.PEDESTRIAN, pos=(1, 2, 0.9), extent=(0.3, 0.3, 0.9)),
    ]
    out = predicted_objects(snap(1.0, actors), straight_road())
    assert all(p.source is PathSource.STRAIGHT_LINE for p in out)
    assert all(len(p.path) == 1 for p in out)


def test_ego_not_predicted():
    actors = [
        actor_state(1, ActorKind.EGO_VEHICLE, vel=(5, 0, 0)),
        actor_state(2, pos=(20, 0, 0.75), vel=(5, 0, 0)),
    ]
    out = predicted_objects(snap(0.0, actors), straight_road())
    assert [p.actor_id for p in out] == [2]


# -- wire encodings --------------------------------------------------------------


def test_detected_roundtrip():
    objs = [
        DetectedObject(7, ObjectClass.CAR, Pose(1, 2, 3, 0.1, -0.2, 0.3),
                       (2.4, 0.95, 0.75), (5.0, -1.0, 0.0), 12.5),
        DetectedObject(9, ObjectClass.PEDESTRIAN, Pose(-4, 0, 0.9),
                       (0.3, 0.3, 0.9), (1.4, 0.0, 0.0), 12.5),
    ]
    stamp, decoded = decode_detected(encode_detected(12.5, objs))
    assert stamp == 12.5
    assert decoded == objs


def test_tracked_roundtrip():
    objs = [
        TrackedObject(
            3,
            ObjectClass.CAR,
            tuple(
                TrackPoint(0.05 * i, Pose(i * 0.5, 0, 0.75), (10.0, 0.0, 0.0))
                for i in range(1, 6)
            ),
        )
    ]
    stamp, decoded = decode_tracked(encode_tracked(0.25, objs))
    assert stamp == 0.25
    assert decoded == objs


def test_predicted_roundtrip():
    objs = [
        PredictedObject(
            4,
            ObjectClass.CAR,
            PathSource.ROAD_WAYPOINTS,
            tuple((0.5 * k, Pose(5 * k, 0, 0.75)) for k in range(17)),
        ),
        PredictedObject(6, ObjectClass.PROP, PathSource.STRAIGHT_LINE,
                        ((0.0, Pose(1, 1, 0.5)),)),
    ]
    stamp, decoded = decode_predicted(encode_predicted(1.5, objs))
    assert stamp == 1.5
    assert decoded == objs


def test_decode_rejects_malformed_payloads():
    payload = encode_detected(1.0, [])
    with pytest.raises(ValueError):
        decode_detected(payload[:4])
    with pytest.raises(ValueError):
        decode_detected(payload + b"x")


# -- publisher glue ----------------------------------------------------------------


def test_publisher_emits_all_three_streams_every_tick():
    road = straight_road(length=200.0)
    world = World(road, dt=DT, mode=TickMode.SYNC_FAST, seed=5)
    world.spawn_actor(
        ActorKind.EGO_VEHICLE, Pose(0, 0, 0.75), (2.4, 0.95, 0.75),
        managed_by=ManagedBy.EXTERNAL,
    )
    world.spawn_actor(
        ActorKind.VEHICLE, Pose(30, 0, 0.75), (2.4, 0.95, 0.75), velocity=(8, 0, 0)
    )
    bus = Bus()
    try:
        pub = GroundTruthPublisher(bus, road)
        subs = {
            name: bus.subscribe(name)
            for name in (DETECTED_TOPIC, TRACKED_TOPIC, PREDICTED_TOPIC)
        }
        for _ in range(5):
            snapshot = world.tick()
            pub.publish(snapshot)
        got_detected = subs[DETECTED_TOPIC].drain()
        got_tracked = subs[TRACKED_TOPIC].drain()
        got_predicted = subs[PREDICTED_TOPIC].drain()
        assert len(got_detected) == len(got_tracked) == len(got_predicted) == 4
        stamp, detected = decode_detected(got_detected[-1].payload)
        assert stamp == pytest.approx(5 * DT)
        assert [d.actor_id for d in detected] == [2]
        assert detected[0].pose.x == pytest.approx(30 + 8 * 5 * DT)
        _, tracked = decode_tracked(got_tracked[-1].payload)
        assert {t.actor_id for t in tracked} == {1, 2}
        assert len(tracked[0].history) == 5
        _, predicted = decode_predicted(got_predicted[-1].payload)
        assert [p.actor_id for p in predicted] == [2]
        assert predicted[0].source is PathSource.ROAD_WAYPOINTS
    finally:
        bus.close()
