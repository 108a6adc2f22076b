"""Actor replication between worlds via first-order extrapolation.

A bridge periodically captures reference states (pose, velocity, yaw rate,
latest control) of registered actors on a primary world, ships them over a
Reliable bus topic, and overwrites the mapped actors on a secondary world
with the reference extrapolated to the *secondary's* current sim time.
Linear motion replicates exactly no matter the cycle period or transport
latency; smooth motion with |accel| ≤ A stays within ½·A·(period+latency)².

The two sim clocks are never coupled: applies go through the secondary
world's command mailbox and only touch actor state.  Between applies a
replicated actor (managed as EXTERNAL) coasts on its last received
velocity, which doubles as the "latest control" intent.  If the link stays
down for ``STALE_LIMIT`` consecutive cycles the replicas are frozen in
place and flagged until fresh references arrive.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .actuation import ControlCommand, Gear
from .bus import Bus, Reliability, TopicSpec
from .geom import Pose
from .world import Snapshot, World

SYNC_TOPIC = "/sync/ref_states"
SYNC_CAPACITY = 20
DEFAULT_PERIOD = 0.1  # seconds between sync cycles
STALE_LIMIT = 5  # consecutive missed cycles before replicas freeze


class SyncError(Exception):
    pass


class CapacityExceeded(SyncError):
    pass


class TimeReversed(SyncError):
    pass


class LinkDown(SyncError):
    pass


class AlreadyMapped(SyncError):
    pass


class NotMapped(SyncError):
    pass


@dataclass(frozen=True, slots=True)
class RefState:
    actor_id: int
    stamp: float  # primary sim time at capture
    pose: Pose
    velocity: tuple[float, float, float]
    yaw_rate: float
    last_control: Optional[ControlCommand] = None


def capture_reference(
    snapshot: Snapshot,
    ids,
    controls: Optional[Mapping[int, ControlCommand]] = None,
) -> list[RefState]:
    """One RefState per id, stamped with the snapshot time.

    Raises UnknownActor (from the snapshot) for ids not present.
    """
    controls = controls or {}
    out = []
    for actor_id in ids:
        actor = snapshot.actor(actor_id)
        out.append(
            RefState(
                actor_id=actor_id,
                stamp=snapshot.sim_time,
                pose=actor.pose,
                velocity=actor.velocity,
                yaw_rate=actor.yaw_rate,
                last_control=controls.get(actor_id),
            )
        )
    return out


def extrapolate(ref: RefState, t: float) -> Pose:
    """First-order continuation of the reference out to time ``t``."""
    dt = t - ref.stamp
    if dt < -1e-12:
        raise TimeReversed(f"extrapolation target {t} precedes capture {ref.stamp}")
    p = ref.pose
    v = ref.velocity
    return Pose(
        p.x + v[0] * dt,
        p.y + v[1] * dt,
        p.z + v[2] * dt,
        roll=p.roll,
        pitch=p.pitch,
        yaw=p.yaw + ref.yaw_rate * dt,
    )


# -- wire layout ----------------------------------------------------------------
#
# Batch payload: header '<dI' (capture stamp, record count), then per record
# '<Id6d3ddB' (actor id, stamp, pose xyzrpy, velocity, yaw_rate, control flag)
# followed, when the flag is 1, by '<dddB' (steer, accel, command stamp, gear:
# 0 none / 1 drive / 2 reverse).  Little-endian throughout.

_BATCH_HEADER = struct.Struct("<dI")
_REF_FIXED = struct.Struct("<Id6d3ddB")
_REF_CONTROL = struct.Struct("<dddB")

_GEAR_CODE = {None: 0, Gear.DRIVE: 1, Gear.REVERSE: 2}
_GEAR_FROM = {v: k for k, v in _GEAR_CODE.items()}


def encode_ref_states(stamp: float, refs: list[RefState]) -> bytes:
    parts = [_BATCH_HEADER.pack(stamp, len(refs))]
    for r in refs:
        p = r.pose
        parts.append(
            _REF_FIXED.pack(
                r.actor_id,
                r.stamp,
                p.x,
                p.y,
                p.z,
                p.roll,
                p.pitch,
                p.yaw,
                *r.velocity,
                r.yaw_rate,
                0 if r.last_control is None else 1,
            )
        )
        if r.last_control is not None:
            c = r.last_control
            parts.append(
                _REF_CONTROL.pack(
                    c.target_steer, c.target_accel, c.stamp, _GEAR_CODE[c.mode_hint]
                )
            )
    return b"".join(parts)


def decode_ref_states(payload: bytes) -> tuple[float, list[RefState]]:
    stamp, count = _BATCH_HEADER.unpack_from(payload, 0)
    off = _BATCH_HEADER.size
    refs = []
    for _ in range(count):
        vals = _REF_FIXED.unpack_from(payload, off)
        off += _REF_FIXED.size
        control = None
        if vals[12]:
            steer, accel, cstamp, gear = _REF_CONTROL.unpack_from(payload, off)
            off += _REF_CONTROL.size
            control = ControlCommand(
                target_steer=steer,
                target_accel=accel,
                stamp=cstamp,
                mode_hint=_GEAR_FROM[gear],
            )
        refs.append(
            RefState(
                actor_id=vals[0],
                stamp=vals[1],
                pose=Pose(*vals[2:8]),
                velocity=vals[8:11],
                yaw_rate=vals[11],
                last_control=control,
            )
        )
    if off != len(payload):
        raise ValueError(f"{len(payload) - off} trailing bytes in ref batch")
    return stamp, refs


# -- registration ----------------------------------------------------------------


class SyncSet:
    """Bijective primary-id → secondary-id mapping with a hard capacity."""

    def __init__(self, capacity: int = SYNC_CAPACITY):
        self.capacity = capacity
        self._forward: dict[int, int] = {}
        self._reverse: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._forward)

    def __contains__(self, primary_id: int) -> bool:
        return primary_id in self._forward

    def register(self, primary_id: int, secondary_id: int) -> None:
        if primary_id in self._forward:
            raise AlreadyMapped(f"primary actor {primary_id} already registered")
        if secondary_id in self._reverse:
            raise AlreadyMapped(f"secondary actor {secondary_id} already registered")
        if len(self._forward) >= self.capacity:
            raise CapacityExceeded(f"sync set is full ({self.capacity} actors)")
        self._forward[primary_id] = secondary_id
        self._reverse[secondary_id] = primary_id

    def deregister(self, primary_id: int) -> None:
        try:
            secondary_id = self._forward.pop(primary_id)
        except KeyError:
            raise NotMapped(f"primary actor {primary_id} is not registered") from None
        del self._reverse[secondary_id]

    def secondary_for(self, primary_id: int) -> Optional[int]:
        return self._forward.get(primary_id)

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self._forward.items())


# -- the bridge -------------------------------------------------------------------


class SyncBridge:
    """Capture/send on the primary side, receive/apply on the secondary side.

    ``transmit`` and ``apply_pending`` are the two halves (separable so
    transport latency can sit between them); ``cycle`` runs both and
    implements the staleness policy.  ``maybe_cycle`` rate-limits cycles to
    the configured period against the primary's sim clock.
    """

    def __init__(
        self,
        primary: World,
        secondary: World,
        bus: Bus,
        *,
        sync_set: Optional[SyncSet] = None,
        period: float = DEFAULT_PERIOD,
        controls_fn: Optional[Callable[[], Mapping[int, ControlCommand]]] = None,
    ):
        if not period > 0:
            raise ValueError("period must be > 0")
        self.primary = primary
        self.secondary = secondary
        self.sync_set = sync_set or SyncSet()
        self.period = period
        self.link_up = True
        self.missed = 0
        self.frozen = False
        self._controls_fn = controls_fn
        self._last_cycle = -float("inf")
        self._pub = bus.advertise(TopicSpec(SYNC_TOPIC, Reliability.RELIABLE, 8))
        self._sub = bus.subscribe(SYNC_TOPIC)

    # primary side ------------------------------------------------------------

    def transmit(self) -> int:
        """Capture and publish one reference batch; LinkDown when the link is cut."""
        if not self.link_up:
            raise LinkDown("sync link is down")
        snap = self.primary.snapshot()
        present = {a.actor_id for a in snap.actors}
        ids = [pid for pid, _ in self.sync_set.pairs() if pid in present]
        controls = self._controls_fn() if self._controls_fn else None
        refs = capture_reference(snap, ids, controls)
        self._pub.publish(snap.sim_time, encode_ref_states(snap.sim_time, refs))
        self.missed = 0
        return len(refs)

    # secondary side ------------------------------------------------------------

    def apply_pending(self) -> int:
        """Queue every received batch for application on the secondary world."""
        batches = self._sub.drain()
        for env in batches:
            _, refs = decode_ref_states(env.payload)
            self.secondary.post(self._make_apply(refs))
        return len(batches)

    def _make_apply(self, refs: list[RefState]):
        def apply(world: World) -> None:
            t = world.clock.sim_time
            for ref in refs:
                secondary_id = self.sync_set.secondary_for(ref.actor_id)
                if secondary_id is None:
                    continue
                actor = world.actors.get(secondary_id)
                if actor is None:
                    continue
                # never rewind: a secondary that lags the capture stamp gets
                # the reference as-is and converges on subsequent ticks
                target = max(t, ref.stamp)
                actor.pose = extrapolate(ref, target)
                actor.velocity = np.asarray(ref.velocity, dtype=float)
                actor.yaw_rate = ref.yaw_rate
            self.frozen = False

        return apply

    # cycle control ----------------------------------------------------------------

    def cycle(self) -> bool:
        """One capture→transmit→apply round; False when the link was down."""
        try:
            self.transmit()
        except LinkDown:
            self.missed += 1
            if self.missed >= STALE_LIMIT and not self.frozen:
                self._freeze()
            return False
        self.apply_pending()
        return True

    def maybe_cycle(self) -> bool:
        """Run a cycle when a full period has elapsed on the primary clock."""
        t = self.primary.clock.sim_time
        if t - self._last_cycle < self.period - 1e-9:
            return False
        self._last_cycle = t
        self.cycle()
        return True

    def _freeze(self) -> None:
        self.frozen = True
        pairs = self.sync_set.pairs()

        def freeze(world: World) -> None:
            for _, secondary_id in pairs:
                actor = world.actors.get(secondary_id)
                if actor is not None:
                    actor.velocity = np.zeros(3)
                    actor.yaw_rate = 0.0

        self.secondary.post(freeze)
