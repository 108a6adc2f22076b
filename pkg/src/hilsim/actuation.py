"""Vehicle interface: command filtering, longitudinal control modes,
kinematic-bicycle steering, and 50 Hz status records.

Three longitudinal modes are supported:

* ``AccelIntegration`` — commanded acceleration integrated exactly.
* ``ThrottleMapPI`` — feedforward throttle from an inverted calibration
  map plus a PI correction on the acceleration error, driving an internal
  noisy throttle plant.
* ``AckermannVelocity`` — commanded acceleration accumulates into a target
  speed tracked by a first-order law (time constant ``tau``).

The actuator mutates only the ego actor and only from inside the world
tick (register :meth:`VehicleActuator.on_tick` as a tick hook); commands
may arrive from any thread through :meth:`VehicleActuator.submit`.
"""
from __future__ import annotations

import enum
import json
import math
import threading
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .world import ManagedBy, World

__all__ = [
    "AccelIntegration",
    "AckermannVelocity",
    "ControlCommand",
    "ControlLimits",
    "Gear",
    "Indicators",
    "InsufficientSamples",
    "NoEgo",
    "NonFiniteCommand",
    "Plant",
    "StatusEmitter",
    "ThrottleMap",
    "ThrottleMapPI",
    "UnfilteredCommand",
    "VehicleActuator",
    "VehicleStatus",
    "calibrate_throttle_map",
    "filter_command",
]

CONTROL_TOPIC = "/control/command/control_cmd"
STATUS_TOPICS = (
    "/vehicle/status/steering_status",
    "/vehicle/status/gear_status",
    "/vehicle/status/velocity_status",
)
STATUS_PERIOD = 0.02  # 50 Hz


class ActuationError(Exception):
    pass


class NonFiniteCommand(ActuationError):
    pass


class UnfilteredCommand(ActuationError):
    pass


class NoEgo(ActuationError):
    pass


class InsufficientSamples(ActuationError):
    pass


class Gear(enum.Enum):
    DRIVE = "drive"
    REVERSE = "reverse"


class Indicators(enum.Enum):
    OFF = "off"
    LEFT = "left"
    RIGHT = "right"
    HAZARD = "hazard"


@dataclass(frozen=True, slots=True)
class ControlCommand:
    target_steer: float = 0.0
    target_accel: float = 0.0
    stamp: float = 0.0
    mode_hint: Optional[Gear] = None


@dataclass(frozen=True, slots=True)
class ControlLimits:
    max_steer: float = 0.61
    accel_min: float = -3.0
    accel_max: float = 3.5

    def __post_init__(self):
        if not self.max_steer > 0:
            raise ValueError("max_steer must be > 0")
        if not (self.accel_min < 0.0 < self.accel_max):
            raise ValueError("accel range must straddle zero")


def filter_command(cmd: ControlCommand, limits: ControlLimits) -> ControlCommand:
    """Clamp steer/accel into the allowed envelope; stamp passes through."""
    if not (math.isfinite(cmd.target_steer) and math.isfinite(cmd.target_accel)):
        raise NonFiniteCommand(f"non-finite command {cmd}")
    return replace(
        cmd,
        target_steer=min(max(cmd.target_steer, -limits.max_steer), limits.max_steer),
        target_accel=min(max(cmd.target_accel, limits.accel_min), limits.accel_max),
    )


def _check_filtered(cmd: ControlCommand, limits: ControlLimits) -> None:
    if (
        abs(cmd.target_steer) > limits.max_steer
        or cmd.target_accel > limits.accel_max
        or cmd.target_accel < limits.accel_min
    ):
        raise UnfilteredCommand(f"command outside limits: {cmd}")


# --- throttle plant and calibration map -------------------------------------


@dataclass
class Plant:
    """Linear throttle plant: a = clamp(c1*u - c2*v - c3) + noise.

    Input u is throttle in [0, 1]; negative u is treated as a brake
    fraction under the same linear law.
    """

    c1: float = 4.0
    c2: float = 0.05
    c3: float = 0.4
    noise_std: float = 0.2
    limits: ControlLimits = ControlLimits()

    def accel(self, u: float, v: float, rng: np.random.Generator) -> float:
        u = min(max(u, -1.0), 1.0)
        a = self.c1 * u - self.c2 * v - self.c3
        a = min(max(a, self.limits.accel_min), self.limits.accel_max)
        if self.noise_std > 0.0:
            a += rng.normal(0.0, self.noise_std)
        return a


class ThrottleMap:
    """Per-throttle linear fits accel = m(u)*v + b(u), invertible at (v, a)."""

    def __init__(self, throttles, slopes, intercepts):
        self.throttles = np.asarray(throttles, dtype=float)
        self.slopes = np.asarray(slopes, dtype=float)
        self.intercepts = np.asarray(intercepts, dtype=float)
        if not (len(self.throttles) == len(self.slopes) == len(self.intercepts)):
            raise ValueError("mismatched table lengths")
        if len(self.throttles) < 1:
            raise ValueError("empty throttle map")
        order = np.argsort(self.throttles)
        self.throttles = self.throttles[order]
        self.slopes = self.slopes[order]
        self.intercepts = self.intercepts[order]

    @classmethod
    def from_plant(cls, plant: Plant, throttles=None) -> "ThrottleMap":
        """Analytic map for a known plant (the noiseless ideal)."""
        us = np.asarray(
            [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] if throttles is None else throttles,
            dtype=float,
        )
        return cls(us, np.full(len(us), -plant.c2), plant.c1 * us - plant.c3)

    def accel_at(self, throttle: float, v: float) -> float:
        i = int(np.clip(np.searchsorted(self.throttles, throttle) - 1, 0, len(self.throttles) - 2)) \
            if len(self.throttles) > 1 else 0
        if len(self.throttles) == 1:
            return float(self.slopes[0] * v + self.intercepts[0])
        u0, u1 = self.throttles[i], self.throttles[i + 1]
        t = 0.0 if u1 == u0 else (throttle - u0) / (u1 - u0)
        m = self.slopes[i] + t * (self.slopes[i + 1] - self.slopes[i])
        b = self.intercepts[i] + t * (self.intercepts[i + 1] - self.intercepts[i])
        return float(m * v + b)

    def invert(self, v: float, target_accel: float) -> float:
        """Feedforward throttle for a target acceleration at speed v.

        Clamps to the calibrated throttle domain; the PI loop covers the
        remainder.
        """
        accels = self.slopes * v + self.intercepts
        if target_accel <= accels[0]:
            return float(self.throttles[0])
        if target_accel >= accels[-1]:
            return float(self.throttles[-1])
        i = int(np.searchsorted(accels, target_accel) - 1)
        a0, a1 = accels[i], accels[i + 1]
        t = 0.0 if a1 == a0 else (target_accel - a0) / (a1 - a0)
        return float(self.throttles[i] + t * (self.throttles[i + 1] - self.throttles[i]))

    def gain(self) -> float:
        """Calibrated accel-per-throttle slope (for unit conversion)."""
        if len(self.throttles) < 2:
            return 1.0
        du = self.throttles[-1] - self.throttles[0]
        da = self.intercepts[-1] - self.intercepts[0]
        return float(da / du) if abs(du) > 1e-9 and abs(da / du) > 1e-9 else 1.0

    def to_json(self) -> dict:
        return {
            "throttles": self.throttles.tolist(),
            "slopes": self.slopes.tolist(),
            "intercepts": self.intercepts.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ThrottleMap":
        return cls(doc["throttles"], doc["slopes"], doc["intercepts"])


def calibrate_throttle_map(
    plant: Plant,
    throttles,
    v_grid,
    runs: int,
    seed: int = 0,
    window: int = 10,
    settle: float = 0.5,
    dt: float = 0.02,
) -> ThrottleMap:
    """Measure the plant and fit one line accel = m*v + b per throttle.

    For every (throttle, start speed) the plant is simulated through a
    settle phase, then `window` (v, accel) samples are recorded.  The whole
    procedure repeats `runs` times with independent noise; sample pairs are
    averaged index-wise across runs before a least-squares line is fit.
    """
    throttles = list(throttles)
    v_grid = list(v_grid)
    if not throttles or not v_grid or runs < 1:
        raise InsufficientSamples("need >=1 throttle, start speed, and run")
    slopes, intercepts = [], []
    for ui, u in enumerate(throttles):
        acc = np.zeros((len(v_grid) * window, 2))
        for r in range(runs):
            rng = np.random.default_rng(seed + 7919 * r + 104729 * ui)
            k = 0
            for v0 in v_grid:
                v = float(v0)
                for _ in range(int(round(settle / dt))):
                    v += plant.accel(u, v, rng) * dt
                for _ in range(window):
                    a = plant.accel(u, v, rng)
                    acc[k] += (v, a)
                    v += a * dt
                    k += 1
        acc /= runs
        m, b = np.polyfit(acc[:, 0], acc[:, 1], 1)
        slopes.append(float(m))
        intercepts.append(float(b))
    return ThrottleMap(throttles, slopes, intercepts)


# --- longitudinal modes ------------------------------------------------------


@dataclass(frozen=True, slots=True)
class LongitudinalState:
    v: float = 0.0
    a_applied: float = 0.0
    target_speed: Optional[float] = None  # AckermannVelocity only
    pi_integral: float = 0.0  # ThrottleMapPI only


class AccelIntegration:
    """v' = v + a*dt, exactly; the actuator is an ideal integrator."""

    name = "accel_integration"

    def __init__(self, limits: ControlLimits = ControlLimits()):
        self.limits = limits

    def step(
        self, state: LongitudinalState, cmd: ControlCommand, dt: float,
        rng: np.random.Generator,
    ) -> LongitudinalState:
        _check_filtered(cmd, self.limits)
        return replace(
            state,
            v=state.v + cmd.target_accel * dt,
            a_applied=cmd.target_accel,
        )


class AckermannVelocity:
    """Accumulates accel into a target speed; first-order speed tracking."""

    name = "ackermann_velocity"

    def __init__(self, limits: ControlLimits = ControlLimits(), tau: float = 0.5):
        if tau <= 0:
            raise ValueError("tau must be > 0")
        self.limits = limits
        self.tau = tau

    def step(self, state, cmd, dt, rng) -> LongitudinalState:
        _check_filtered(cmd, self.limits)
        target = (state.target_speed if state.target_speed is not None else state.v)
        target += cmd.target_accel * dt
        gain = min(dt / self.tau, 1.0)
        v = state.v + gain * (target - state.v)
        return replace(
            state,
            v=v,
            a_applied=(v - state.v) / dt,
            target_speed=target,
        )


class ThrottleMapPI:
    """Feedforward map inversion plus PI on the acceleration error."""

    name = "throttle_map_pi"

    def __init__(
        self,
        mapping: ThrottleMap,
        plant: Plant,
        kp: float = 0.5,
        ki: float = 0.1,
        limits: ControlLimits = ControlLimits(),
    ):
        if kp < 0 or ki < 0:
            raise ValueError("PI gains must be >= 0")
        self.map = mapping
        self.plant = plant
        self.kp = kp
        self.ki = ki
        self.limits = limits

    def step(self, state, cmd, dt, rng) -> LongitudinalState:
        _check_filtered(cmd, self.limits)
        error = cmd.target_accel - state.a_applied
        integral = state.pi_integral + error * dt
        # anti-windup: the integral term never usefully exceeds the accel range
        integral = min(max(integral, self.limits.accel_min), self.limits.accel_max)
        # PI acts in acceleration units; the map gain converts to throttle
        correction = (self.kp * error + self.ki * integral) / self.map.gain()
        u = self.map.invert(state.v, cmd.target_accel) + correction
        a = self.plant.accel(u, state.v, rng)
        return replace(
            state,
            v=state.v + a * dt,
            a_applied=a,
            pi_integral=integral,
        )


def make_longitudinal_mode(name: str, limits: ControlLimits, plant: Optional[Plant] = None,
                           kp: float = 0.5, ki: float = 0.1, tau: float = 0.5):
    if name == AccelIntegration.name:
        return AccelIntegration(limits)
    if name == AckermannVelocity.name:
        return AckermannVelocity(limits, tau=tau)
    if name == ThrottleMapPI.name:
        plant = plant if plant is not None else Plant(limits=limits)
        return ThrottleMapPI(ThrottleMap.from_plant(plant), plant, kp, ki, limits)
    raise ValueError(f"unknown longitudinal mode {name!r}")


# --- vehicle status ----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class VehicleStatus:
    steer_angle: float = 0.0
    longitudinal_velocity: float = 0.0
    gear: Gear = Gear.DRIVE
    indicators: Indicators = Indicators.OFF
    stamp: float = 0.0
    accel_applied: float = 0.0
    last_command: Optional[ControlCommand] = None


def status_payloads(status: VehicleStatus) -> dict[str, bytes]:
    """Encode one status record onto the three status topics."""
    steer = {"stamp": status.stamp, "steering_tire_angle": status.steer_angle}
    gear = {"stamp": status.stamp, "gear": status.gear.value}
    vel = {
        "stamp": status.stamp,
        "longitudinal_velocity": status.longitudinal_velocity,
        "indicators": status.indicators.value,
        "accel_applied": status.accel_applied,
    }
    return {
        STATUS_TOPICS[0]: json.dumps(steer).encode(),
        STATUS_TOPICS[1]: json.dumps(gear).encode(),
        STATUS_TOPICS[2]: json.dumps(vel).encode(),
    }


def encode_command(cmd: ControlCommand) -> bytes:
    doc = {
        "stamp": cmd.stamp,
        "steer": cmd.target_steer,
        "accel": cmd.target_accel,
    }
    if cmd.mode_hint is not None:
        doc["gear"] = cmd.mode_hint.value
    return json.dumps(doc).encode()


def decode_command(payload: bytes) -> ControlCommand:
    doc = json.loads(payload.decode())
    hint = doc.get("gear")
    return ControlCommand(
        target_steer=float(doc.get("steer", 0.0)),
        target_accel=float(doc.get("accel", 0.0)),
        stamp=float(doc.get("stamp", 0.0)),
        mode_hint=Gear(hint) if hint else None,
    )


# --- the actuator ------------------------------------------------------------


class VehicleActuator:
    """Applies filtered control commands to the ego actor inside the tick."""

    REVERSE_ENGAGE_SPEED = 0.1  # |v| below which a gear change is honored

    def __init__(
        self,
        mode,
        limits: ControlLimits = ControlLimits(),
        wheelbase: float = 3.2,
        seed: int = 0,
    ):
        if wheelbase <= 0:
            raise ValueError("wheelbase must be > 0")
        self.mode = mode
        self.limits = limits
        self.wheelbase = wheelbase
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._pending: Optional[ControlCommand] = None
        self._cmd = ControlCommand()
        self._pending_gear: Optional[Gear] = None
        self._state = LongitudinalState()
        self._steer = 0.0
        self._gear = Gear.DRIVE
        self._indicators = Indicators.OFF
        self._status = VehicleStatus()

    def submit(self, cmd: ControlCommand) -> ControlCommand:
        """Filter and queue a command; the newest one wins each tick."""
        filtered = filter_command(cmd, self.limits)
        with self._lock:
            self._pending = filtered
        return filtered

    def set_indicators(self, indicators: Indicators) -> None:
        with self._lock:
            self._indicators = indicators

    def on_tick(self, world: World) -> None:
        if world.ego_id is None:
            raise NoEgo("actuator requires a spawned ego vehicle")
        with self._lock:
            if self._pending is not None:
                self._cmd = self._pending
                self._pending = None
                if self._cmd.mode_hint is not None:
                    self._pending_gear = self._cmd.mode_hint
            cmd = self._cmd
            indicators = self._indicators

        if self._pending_gear is not None and self._pending_gear is not self._gear:
            if abs(self._state.v) < self.REVERSE_ENGAGE_SPEED:
                self._gear = self._pending_gear
                self._pending_gear = None
        elif self._pending_gear is self._gear:
            self._pending_gear = None

        # positive accel acts along the gear direction; negative accel is a
        # brake: it always pushes |v| toward zero and never through it
        a_cmd = cmd.target_accel
        v0 = self._state.v
        if a_cmd >= 0.0:
            eff = a_cmd if self._gear is Gear.DRIVE else -a_cmd
        elif abs(v0) > 1e-9:
            eff = a_cmd if v0 > 0.0 else -a_cmd
        else:
            eff = 0.0
        signed = replace(cmd, target_accel=eff)
        self._state = self.mode.step(self._state, signed, world.clock.dt, self.rng)
        if a_cmd < 0.0 and v0 * self._state.v < 0.0:
            self._state = replace(
                self._state,
                v=0.0,
                target_speed=0.0 if self._state.target_speed is not None else None,
            )
        self._steer = signed.target_steer

        ego = world.ego
        ego.managed_by = ManagedBy.EXTERNAL  # the actuator owns ego velocity
        v = self._state.v
        yaw = ego.pose.yaw
        ego.velocity = np.array([v * math.cos(yaw), v * math.sin(yaw), 0.0])
        ego.acceleration = np.array(
            [self._state.a_applied * math.cos(yaw), self._state.a_applied * math.sin(yaw), 0.0]
        )
        ego.yaw_rate = v * math.tan(self._steer) / self.wheelbase

        with self._lock:
            self._status = VehicleStatus(
                steer_angle=self._steer,
                longitudinal_velocity=v,
                gear=self._gear,
                indicators=indicators,
                stamp=world.clock.sim_time,
                accel_applied=self._state.a_applied,
                last_command=cmd,
            )

    def status(self) -> VehicleStatus:
        with self._lock:
            return self._status

    @property
    def speed(self) -> float:
        return self._state.v


class StatusEmitter:
    """Publishes the actuator's latest status at 50 Hz in sim time.

    Driven by the tick in every mode (call :meth:`on_tick`), emitting every
    record whose due time has passed.  When the tick is coarser than the
    status period, several emissions fire on one tick; each envelope is
    stamped with its own due time so the 20 ms cadence stays visible in the
    stream, while the payload keeps the sample's sim time.
    """

    def __init__(self, actuator: VehicleActuator, publishers: dict[str, object],
                 period: float = STATUS_PERIOD, start_time: float = 0.0):
        self.actuator = actuator
        self.publishers = publishers
        self.period = period
        # join the cadence grid at start_time: an emitter attached mid-run
        # (service restart) must not replay every due time since zero
        self._next_due = (math.floor(start_time / period + 1e-9) + 1) * period
        self.emitted = 0

    def emit_once(self, stamp: Optional[float] = None) -> None:
        status = self.actuator.status()
        envelope_stamp = status.stamp if stamp is None else stamp
        for topic, payload in status_payloads(status).items():
            pub = self.publishers.get(topic)
            if pub is not None:
                pub.publish(envelope_stamp, payload)
        self.emitted += 1

    def on_tick(self, world: World) -> None:
        while self._next_due <= world.clock.sim_time + 1e-12:
            self.emit_once(stamp=self._next_due)
            self._next_due += self.period
