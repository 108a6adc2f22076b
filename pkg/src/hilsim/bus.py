"""In-process pub/sub bus with per-subscriber queues and two QoS levels.

Delivery is fan-out: every subscription owns a bounded queue.  What happens
when a queue is full is the subscriber's choice:

* ``BEST_EFFORT`` — the oldest queued message is dropped, a per-subscription
  drop counter increments, and the publisher never blocks.
* ``RELIABLE`` — the publisher blocks until there is room (or the
  subscription closes), giving lossless in-order delivery.

Latched topics (``/tf_static`` by convention) hand their last message to
every late subscriber at subscribe time.
"""
from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

__all__ = [
    "Bus",
    "BusClosed",
    "BusError",
    "Envelope",
    "Publisher",
    "QosMismatch",
    "Reliability",
    "Subscription",
    "TopicSpec",
]


class BusError(Exception):
    pass


class BusClosed(BusError):
    pass


class QosMismatch(BusError):
    pass


class Reliability(enum.Enum):
    BEST_EFFORT = "best_effort"
    RELIABLE = "reliable"


@dataclass(frozen=True, slots=True)
class TopicSpec:
    name: str
    reliability: Reliability = Reliability.RELIABLE
    depth: int = 10
    latched: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("queue depth must be >= 1")
        if not self.name.startswith("/"):
            raise ValueError(f"topic name must start with '/': {self.name!r}")


@dataclass(frozen=True, slots=True)
class Envelope:
    topic: str
    seq: int
    stamp: float
    payload: bytes


class _BoundedQueue:
    """Bounded FIFO where `close` releases any blocked producer/consumer."""

    def __init__(self, depth: int):
        self._items: deque[Envelope] = deque()
        self._depth = depth
        self._cond = threading.Condition()
        self.closed = False
        self.drops = 0

    def offer(self, env: Envelope, block: bool) -> None:
        with self._cond:
            if self.closed:
                return
            if block:
                while len(self._items) >= self._depth and not self.closed:
                    self._cond.wait()
                if self.closed:
                    return
            elif len(self._items) >= self._depth:
                self._items.popleft()
                self.drops += 1
            self._items.append(env)
            self._cond.notify_all()

    def take(self, timeout: Optional[float]) -> Optional[Envelope]:
        with self._cond:
            if not self._items and not self.closed:
                self._cond.wait(timeout)
            if not self._items:
                return None
            env = self._items.popleft()
            self._cond.notify_all()
            return env

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._items.clear()
            self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class Subscription:
    """One subscriber's end of a topic; pull with recv(), or drain()."""

    def __init__(self, bus: "Bus", topic: str, reliability: Reliability, depth: int):
        self.topic = topic
        self.reliability = reliability
        self._bus = bus
        self._queue = _BoundedQueue(depth)

    @property
    def drops(self) -> int:
        return self._queue.drops

    @property
    def pending(self) -> int:
        return len(self._queue)

    def recv(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        """Next envelope, or None on timeout / closed-and-empty."""
        return self._queue.take(timeout)

    def drain(self) -> list[Envelope]:
        out = []
        while True:
            env = self._queue.take(0.0)
            if env is None:
                return out
            out.append(env)

    def close(self) -> None:
        self._bus._drop_subscription(self)
        self._queue.close()

    def __enter__(self) -> "Subscription":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class Publisher:
    def __init__(self, bus: "Bus", spec: TopicSpec):
        self._bus = bus
        self.spec = spec

    def publish(self, stamp: float, payload: bytes) -> int:
        """Send payload to all current subscribers; returns delivery count."""
        return self._bus._publish(self.spec.name, stamp, payload)


class _Topic:
    def __init__(self, spec: Optional[TopicSpec]):
        self.spec = spec  # None until advertised (latent subscriptions)
        self.seq = 0
        self.subs: list[Subscription] = []
        self.latched_env: Optional[Envelope] = None


class Bus:
    """Thread-safe topic directory; see module docstring for QoS rules."""

    def __init__(self):
        self._topics: dict[str, _Topic] = {}
        self._lock = threading.Lock()
        self._closed = False

    def advertise(self, spec: TopicSpec) -> Publisher:
        with self._lock:
            if self._closed:
                raise BusClosed("bus is closed")
            topic = self._topics.get(spec.name)
            if topic is None:
                self._topics[spec.name] = _Topic(spec)
            elif topic.spec is None:
                topic.spec = spec
            elif topic.spec != spec:
                raise QosMismatch(
                    f"{spec.name}: advertised {topic.spec}, requested {spec}"
                )
            return Publisher(self, spec)

    def subscribe(
        self,
        name: str,
        reliability: Optional[Reliability] = None,
        depth: Optional[int] = None,
    ) -> Subscription:
        """Subscribe (latently if not yet advertised); QoS defaults to the
        topic's advertised QoS, or Reliable(10) for latent subscriptions."""
        with self._lock:
            if self._closed:
                raise BusClosed("bus is closed")
            topic = self._topics.get(name)
            if topic is None:
                topic = self._topics[name] = _Topic(None)
            if topic.spec is not None:
                reliability = reliability or topic.spec.reliability
                depth = depth or topic.spec.depth
            else:
                # latent subscription: queue settings come from the subscriber
                reliability = reliability or Reliability.RELIABLE
                depth = depth or 10
            sub = Subscription(self, name, reliability, depth)
            topic.subs.append(sub)
            latched = topic.latched_env
        if latched is not None:
            sub._queue.offer(latched, block=False)
        return sub

    def topics(self) -> list[TopicSpec]:
        with self._lock:
            return [t.spec for t in self._topics.values() if t.spec is not None]

    def topic_drops(self, name: str) -> int:
        with self._lock:
            topic = self._topics.get(name)
            return sum(s.drops for s in topic.subs) if topic else 0

    def subscriber_count(self, name: str) -> int:
        with self._lock:
            topic = self._topics.get(name)
            return len(topic.subs) if topic else 0

    def _publish(self, name: str, stamp: float, payload: bytes) -> int:
        if not isinstance(payload, (bytes, bytearray, memoryview)):
            raise TypeError("payload must be bytes")
        payload = bytes(payload)
        with self._lock:
            if self._closed:
                raise BusClosed("bus is closed")
            topic = self._topics.get(name)
            if topic is None:
                return 0
            topic.seq += 1
            env = Envelope(name, topic.seq, stamp, payload)
            if topic.spec is not None and topic.spec.latched:
                topic.latched_env = env
            subs = list(topic.subs)
        # queue handoff happens outside the directory lock so a slow
        # Reliable subscriber cannot stall unrelated topics
        delivered = 0
        for sub in subs:
            sub._queue.offer(env, block=sub.reliability is Reliability.RELIABLE)
            delivered += 1
        return delivered

    def _drop_subscription(self, sub: Subscription) -> None:
        with self._lock:
            topic = self._topics.get(sub.topic)
            if topic and sub in topic.subs:
                topic.subs.remove(sub)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            subs = [s for t in self._topics.values() for s in t.subs]
        for sub in subs:
            sub._queue.close()


def spin_subscription(
    sub: Subscription,
    callback: Callable[[Envelope], None],
    stop: threading.Event,
    poll: float = 0.05,
) -> None:
    """Drain loop for callback-style consumers; run on the consumer's thread."""
    while not stop.is_set():
        env = sub.recv(timeout=poll)
        if env is not None:
            callback(env)
