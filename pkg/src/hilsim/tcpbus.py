"""TCP fan-out for the in-process bus.

A :class:`BusServer` exposes one :class:`~hilsim.bus.Bus` on a TCP socket;
remote processes attach with a :class:`BusClient` that mirrors the in-process
``advertise``/``subscribe`` surface.  Frames use the envelope layout from
:mod:`hilsim.wire`; control exchanges ride on reserved ``!``-prefixed topic
names so the data path needs no second framing:

======================  =========================================  =============
client -> server        JSON payload                               server reply
======================  =========================================  =============
``!advertise``          ``{"name","reliability","depth","latched"}``  ``!adv_ok`` or ``!error``
``!subscribe``          ``{"topic","reliability","depth"}``           ``!sub_ok`` or ``!error``
``!unsubscribe``        ``{"topic"}``                                 (none)
======================  =========================================  =============

Data frames (topic without the ``!`` prefix) are published into the bus; the
sequence number a client sends is ignored because the bus assigns the
authoritative per-topic sequence.  For that reason a TCP subscriber and an
in-process subscriber observe byte-identical envelope streams on Reliable
topics.  One server-side subscription is kept per (client, topic); a client
asking twice for the same topic fans the single stream out locally.
"""
from __future__ import annotations

import json
import logging
import socket
import threading
from typing import Optional

from .bus import Bus, BusClosed, BusError, Envelope, QosMismatch, Reliability, Subscription, TopicSpec
from .wire import Decoder, encode_envelope

log = logging.getLogger(__name__)

_CONTROL_PREFIX = "!"
_RELIABILITY_NAMES = {r.value: r for r in Reliability}


def _spec_to_json(spec: TopicSpec) -> dict:
    return {
        "name": spec.name,
        "reliability": spec.reliability.value,
        "depth": spec.depth,
        "latched": spec.latched,
    }


def _spec_from_json(doc: dict) -> TopicSpec:
    return TopicSpec(
        name=doc["name"],
        reliability=_RELIABILITY_NAMES[doc["reliability"]],
        depth=doc["depth"],
        latched=doc.get("latched", False),
    )


def _control_frame(topic: str, doc: dict) -> bytes:
    return encode_envelope(Envelope(topic, 0, 0.0, json.dumps(doc).encode()))


class _ClientConn:
    """Server-side state for one attached client."""

    def __init__(self, server: "BusServer", sock: socket.socket, peer):
        self.server = server
        self.sock = sock
        self.peer = peer
        self.send_lock = threading.Lock()
        self.subs: dict[str, Subscription] = {}
        self.closed = threading.Event()

    def send(self, frame: bytes) -> bool:
        with self.send_lock:
            try:
                self.sock.sendall(frame)
                return True
            except OSError:
                return False

    def run(self) -> None:
        decoder = Decoder()
        try:
            while not self.closed.is_set():
                chunk = self.sock.recv(65536)
                if not chunk:
                    break
                for env in decoder.feed(chunk):
                    self._handle(env)
        except (OSError, BusError, ValueError) as exc:
            log.debug("bus client %s dropped: %s", self.peer, exc)
        finally:
            self.close()

    def _handle(self, env: Envelope) -> None:
        if not env.topic.startswith(_CONTROL_PREFIX):
            self.server.bus._publish(env.topic, env.stamp, env.payload)
            return
        doc = json.loads(env.payload.decode())
        if env.topic == "!advertise":
            try:
                self.server.bus.advertise(_spec_from_json(doc))
            except (QosMismatch, BusClosed, ValueError) as exc:
                self.send(_control_frame("!error", {
                    "re": "advertise",
                    "topic": doc.get("name", ""),
                    "error": type(exc).__name__,
                    "message": str(exc),
                }))
                return
            self.send(_control_frame("!adv_ok", {"topic": doc["name"]}))
        elif env.topic == "!subscribe":
            self._subscribe(doc)
        elif env.topic == "!unsubscribe":
            sub = self.subs.pop(doc["topic"], None)
            if sub is not None:
                sub.close()
        else:
            log.warning("unknown control topic %r from %s", env.topic, self.peer)

    def _subscribe(self, doc: dict) -> None:
        topic = doc["topic"]
        if topic in self.subs:  # idempotent: the stream is already flowing
            self.send(_control_frame("!sub_ok", {"topic": topic}))
            return
        reliability = doc.get("reliability")
        sub = self.server.bus.subscribe(
            topic,
            _RELIABILITY_NAMES[reliability] if reliability else None,
            doc.get("depth"),
        )
        self.subs[topic] = sub
        threading.Thread(
            target=self._forward, args=(sub,), name=f"busfwd-{topic}", daemon=True
        ).start()
        self.send(_control_frame("!sub_ok", {"topic": topic}))

    def _forward(self, sub: Subscription) -> None:
        while not self.closed.is_set():
            env = sub.recv(timeout=0.25)
            if env is None:
                if sub._queue.closed:
                    return
                continue
            if not self.send(encode_envelope(env)):
                self.close()
                return

    def close(self) -> None:
        if self.closed.is_set():
            return
        self.closed.set()
        for sub in self.subs.values():
            sub.close()
        self.subs.clear()
        # shutdown first: close() alone does not wake a thread blocked in
        # recv() on the same socket, so the FIN would never go out
        for op in (lambda: self.sock.shutdown(socket.SHUT_RDWR), self.sock.close):
            try:
                op()
            except OSError:
                pass
        self.server._forget(self)


class BusServer:
    """Serves one in-process bus over TCP; see the module docstring."""

    def __init__(self, bus: Bus, host: str = "127.0.0.1", port: int = 0):
        self.bus = bus
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._clients: set[_ClientConn] = set()
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._acceptor = threading.Thread(
            target=self._accept_loop, name="bus-server", daemon=True
        )
        self._acceptor.start()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, peer = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _ClientConn(self, sock, peer)
            with self._lock:
                self._clients.add(conn)
            threading.Thread(
                target=conn.run, name=f"bus-conn-{peer}", daemon=True
            ).start()

    def _forget(self, conn: _ClientConn) -> None:
        with self._lock:
            self._clients.discard(conn)

    def close(self) -> None:
        self._closed.set()
        # shutdown wakes the blocked accept() so the acceptor thread exits
        for op in (lambda: self._sock.shutdown(socket.SHUT_RDWR), self._sock.close):
            try:
                op()
            except OSError:
                pass
        with self._lock:
            clients = list(self._clients)
        for conn in clients:
            conn.close()


class RemotePublisher:
    """Publish handle over a BusClient connection."""

    def __init__(self, client: "BusClient", spec: TopicSpec):
        self._client = client
        self.spec = spec

    def publish(self, stamp: float, payload: bytes) -> None:
        """Send payload to the server; delivery counting happens server-side."""
        if not isinstance(payload, (bytes, bytearray, memoryview)):
            raise TypeError("payload must be bytes")
        self._client._send(
            encode_envelope(Envelope(self.spec.name, 0, stamp, bytes(payload)))
        )


class BusClient:
    """Remote counterpart of :class:`~hilsim.bus.Bus` over one TCP socket.

    ``subscribe`` returns the same pull-style :class:`Subscription` objects
    the in-process bus hands out; the reader thread routes incoming envelopes
    into their queues by topic.
    """

    ACK_TIMEOUT = 5.0

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._lock = threading.Lock()
        self._subs: dict[str, list[Subscription]] = {}
        self._acks: dict[str, dict] = {}
        self._ack_cond = threading.Condition(self._lock)
        self._closed = threading.Event()
        self._reader = threading.Thread(
            target=self._read_loop, name="bus-client", daemon=True
        )
        self._reader.start()

    # -- bus surface ---------------------------------------------------------

    def advertise(self, spec: TopicSpec) -> RemotePublisher:
        self._send(_control_frame("!advertise", _spec_to_json(spec)))
        self._await_ack("advertise", spec.name)
        return RemotePublisher(self, spec)

    def subscribe(
        self,
        name: str,
        reliability: Optional[Reliability] = None,
        depth: Optional[int] = None,
    ) -> Subscription:
        sub = Subscription(self, name, reliability or Reliability.RELIABLE, depth or 10)
        with self._lock:
            first = name not in self._subs
            self._subs.setdefault(name, []).append(sub)
        if first:
            self._send(_control_frame("!subscribe", {
                "topic": name,
                "reliability": reliability.value if reliability else None,
                "depth": depth,
            }))
            try:
                self._await_ack("subscribe", name)
            except BusError:
                self._drop_subscription(sub)
                raise
        return sub

    def close(self) -> None:
        self._closed.set()
        # shutdown first so the reader thread (blocked in recv) wakes and the
        # server sees the FIN; close() alone releases neither
        for op in (lambda: self._sock.shutdown(socket.SHUT_RDWR), self._sock.close):
            try:
                op()
            except OSError:
                pass
        with self._lock:
            subs = [s for lst in self._subs.values() for s in lst]
            self._subs.clear()
        for sub in subs:
            sub._queue.close()

    def __enter__(self) -> "BusClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- plumbing -------------------------------------------------------------

    def _drop_subscription(self, sub: Subscription) -> None:
        with self._lock:
            lst = self._subs.get(sub.topic)
            if lst is None:
                return
            if sub in lst:
                lst.remove(sub)
            last = not lst
            if last:
                del self._subs[sub.topic]
        if last and not self._closed.is_set():
            try:
                self._send(_control_frame("!unsubscribe", {"topic": sub.topic}))
            except BusClosed:
                pass

    def _send(self, frame: bytes) -> None:
        if self._closed.is_set():
            raise BusClosed("bus client is closed")
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise BusClosed(f"bus connection lost: {exc}") from exc

    def _await_ack(self, kind: str, topic: str) -> None:
        key = f"{kind}:{topic}"
        with self._ack_cond:
            while key not in self._acks:
                if self._closed.is_set():
                    raise BusClosed("bus connection lost")
                if not self._ack_cond.wait(self.ACK_TIMEOUT):
                    raise BusError(f"no server reply to {kind} {topic!r}")
            reply = self._acks.pop(key)
        if reply.get("error"):
            if reply["error"] == "QosMismatch":
                raise QosMismatch(reply.get("message", ""))
            raise BusError(f"{reply['error']}: {reply.get('message', '')}")

    def _read_loop(self) -> None:
        decoder = Decoder()
        try:
            while not self._closed.is_set():
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                for env in decoder.feed(chunk):
                    self._route(env)
        except (OSError, ValueError) as exc:
            log.debug("bus client reader stopped: %s", exc)
        finally:
            self.close()
            with self._ack_cond:
                self._ack_cond.notify_all()

    def _route(self, env: Envelope) -> None:
        if env.topic.startswith(_CONTROL_PREFIX):
            doc = json.loads(env.payload.decode())
            if env.topic == "!adv_ok":
                key = f"advertise:{doc['topic']}"
            elif env.topic == "!sub_ok":
                key = f"subscribe:{doc['topic']}"
            elif env.topic == "!error":
                key = f"{doc.get('re', '?')}:{doc.get('topic', '')}"
            else:
                return
            with self._ack_cond:
                self._acks[key] = doc
                self._ack_cond.notify_all()
            return
        with self._lock:
            subs = list(self._subs.get(env.topic, ()))
        for sub in subs:
            sub._queue.offer(env, block=sub.reliability is Reliability.RELIABLE)
