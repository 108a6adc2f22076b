"""WebSocket control plane: plugin registration, heartbeats, and UI ops.

Every message is a JSON object carrying ``"v": 1`` and an ``"op"``.  A plugin
joins with ``register`` and receives a ``session`` reply describing the
simulation (bus address, ego actor id, dt, tick mode, map name); it then
heartbeats every :data:`HEARTBEAT_PERIOD` seconds and is marked Stale after
:data:`STALE_AFTER_MISSED` missed beats.  UI commands (sensor toggles,
scenario edits, debug/glyph stream subscriptions, sync registration) are
routed to handlers the owning server installs.

The request surface is published as a JSON schema (:func:`control_schema`);
clients are expected to emit only messages that validate against it.  The
schema is original to this project and versioned so it can evolve.

The core router (:class:`ControlHub`) is transport-agnostic and synchronous,
so protocol behavior is unit-testable without sockets; :class:`ControlServer`
and :class:`PluginSession` wrap it in the ``websockets`` sync API.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HEARTBEAT_PERIOD = 2.0  # seconds between plugin heartbeats
STALE_AFTER_MISSED = 3  # missed beats before a plugin is marked Stale

SERVICE_NAMES = (
    "vehicle_interface_service",
    "sensor_interface_service",
    "scenario_configurator_service",
    "groundtruth_publisher_service",
    "map_service",
)


class ControlError(Exception):
    pass


class ServerUnavailable(ControlError):
    pass


class NameConflict(ControlError):
    pass


class ProtocolError(ControlError):
    pass


class PluginState(Enum):
    REGISTERED = "registered"
    RUNNING = "running"
    STALE = "stale"
    STOPPED = "stopped"


@dataclass(frozen=True, slots=True)
class SessionInfo:
    """What a plugin needs to join one simulation run."""

    sim_address: str  # host:port of the TCP bus, or "inproc"
    ego_actor_id: int
    dt: float
    mode: str  # TickMode value string
    map_name: str

    def to_json(self) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "op": "session",
            "sim_address": self.sim_address,
            "ego_actor_id": self.ego_actor_id,
            "dt": self.dt,
            "mode": self.mode,
            "map_name": self.map_name,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SessionInfo":
        return cls(
            sim_address=doc["sim_address"],
            ego_actor_id=doc["ego_actor_id"],
            dt=doc["dt"],
            mode=doc["mode"],
            map_name=doc["map_name"],
        )


@dataclass
class PluginDescriptor:
    name: str
    state: PluginState = PluginState.REGISTERED
    custom: bool = False
    last_beat: float = 0.0


class PluginRegistry:
    """Names, liveness, and staleness of attached plugins."""

    def __init__(self, now_fn: Callable[[], float] = time.monotonic):
        self._now = now_fn
        self._lock = threading.Lock()
        self._plugins: dict[str, PluginDescriptor] = {}

    def register(self, name: str) -> PluginDescriptor:
        if not name:
            raise ProtocolError("plugin name must be non-empty")
        with self._lock:
            existing = self._plugins.get(name)
            if existing is not None and existing.state is not PluginState.STOPPED:
                raise NameConflict(f"plugin {name!r} is already registered")
            desc = PluginDescriptor(
                name=name,
                custom=name not in SERVICE_NAMES,
                last_beat=self._now(),
            )
            self._plugins[name] = desc
            return desc

    def heartbeat(self, name: str) -> None:
        with self._lock:
            desc = self._plugins.get(name)
            if desc is None:
                raise ProtocolError(f"heartbeat from unregistered plugin {name!r}")
            desc.last_beat = self._now()
            if desc.state is PluginState.STALE:
                desc.state = PluginState.REGISTERED

    def mark_running(self, name: str) -> None:
        with self._lock:
            if name in self._plugins:
                self._plugins[name].state = PluginState.RUNNING

    def mark_stopped(self, name: str) -> None:
        with self._lock:
            if name in self._plugins:
                self._plugins[name].state = PluginState.STOPPED

    def sweep(self) -> list[str]:
        """Mark plugins with 3+ missed beats Stale; returns newly stale names."""
        horizon = self._now() - HEARTBEAT_PERIOD * STALE_AFTER_MISSED
        newly_stale = []
        with self._lock:
            for desc in self._plugins.values():
                if (
                    desc.state in (PluginState.REGISTERED, PluginState.RUNNING)
                    and desc.last_beat < horizon
                ):
                    desc.state = PluginState.STALE
                    newly_stale.append(desc.name)
        for name in newly_stale:
            log.warning("plugin %s went stale (topics left advertised)", name)
        return newly_stale

    def state(self, name: str) -> PluginState:
        with self._lock:
            desc = self._plugins.get(name)
            if desc is None:
                raise ProtocolError(f"unknown plugin {name!r}")
            return desc.state

    def descriptors(self) -> list[PluginDescriptor]:
        with self._lock:
            return [
                PluginDescriptor(d.name, d.state, d.custom, d.last_beat)
                for d in self._plugins.values()
            ]


def _error(name: str, message: str) -> dict:
    return {"v": PROTOCOL_VERSION, "op": "error", "error": name, "message": message}


def _ok(re: str) -> dict:
    return {"v": PROTOCOL_VERSION, "op": "ok", "re": re}


class _ConnState:
    """Per-connection bookkeeping the hub threads through handle()."""

    def __init__(self, push: Optional[Callable[[dict], None]] = None):
        self.plugin_name: Optional[str] = None
        self.debug_stream = False
        self.glyph_stream = False
        self.push = push  # called with reply dicts outside the request flow


class ControlHub:
    """Routes decoded control messages; owns the plugin registry.

    The owning server injects a ``session_fn`` returning the current
    :class:`SessionInfo` and installs named handlers for the UI ops it
    supports (``set_sensor_enabled``, ``scenario_edit``, ``scenario_get``,
    ``sensor_list``, ``sync_register``).  Handlers take the request dict and
    return a reply dict; exceptions become ``error`` replies named after the
    exception class.
    """

    def __init__(
        self,
        session_fn: Callable[[], SessionInfo],
        now_fn: Callable[[], float] = time.monotonic,
    ):
        self._session_fn = session_fn
        self.registry = PluginRegistry(now_fn)
        self._handlers: dict[str, Callable[[dict], dict]] = {}
        self._lock = threading.Lock()
        self._conns: set[_ConnState] = set()
        # lifecycle callbacks the owning server may install: called with the
        # plugin name right after a successful register / after a disconnect
        self.on_register: Optional[Callable[[str], None]] = None
        self.on_stopped: Optional[Callable[[str], None]] = None

    def set_handler(self, op: str, handler: Optional[Callable[[dict], dict]]) -> None:
        with self._lock:
            if handler is None:
                self._handlers.pop(op, None)
            else:
                self._handlers[op] = handler

    # -- connection lifecycle -------------------------------------------------

    def attach(self, conn: _ConnState) -> None:
        with self._lock:
            self._conns.add(conn)

    def detach(self, conn: _ConnState) -> None:
        with self._lock:
            self._conns.discard(conn)
        if conn.plugin_name is not None:
            self.registry.mark_stopped(conn.plugin_name)
            if self.on_stopped is not None:
                try:
                    self.on_stopped(conn.plugin_name)
                except Exception:
                    log.exception("on_stopped callback failed for %s", conn.plugin_name)

    # -- request routing --------------------------------------------------------

    def handle(self, conn: _ConnState, msg: dict) -> Optional[dict]:
        if not isinstance(msg, dict) or "op" not in msg:
            return _error("ProtocolError", "message must be an object with an 'op'")
        if msg.get("v") != PROTOCOL_VERSION:
            return _error("ProtocolError", f"unsupported protocol version {msg.get('v')!r}")
        op = msg["op"]
        try:
            if op == "register":
                return self._register(conn, msg)
            if op == "heartbeat":
                if conn.plugin_name is None:
                    return _error("ProtocolError", "heartbeat before register")
                self.registry.heartbeat(conn.plugin_name)
                return _ok("heartbeat")
            if op == "debug_stream_subscribe":
                conn.debug_stream = True
                return _ok("debug_stream_subscribe")
            if op == "glyph_stream_subscribe":
                conn.glyph_stream = True
                return _ok("glyph_stream_subscribe")
            with self._lock:
                handler = self._handlers.get(op)
            if handler is None:
                return _error("UnknownOp", f"unsupported op {op!r}")
            return handler(msg)
        except ControlError as exc:
            return _error(type(exc).__name__, str(exc))
        except Exception as exc:  # handler faults become protocol errors
            log.exception("control op %s failed", op)
            return _error(type(exc).__name__, str(exc))

    def _register(self, conn: _ConnState, msg: dict) -> dict:
        name = msg.get("name", "")
        desc = self.registry.register(name)
        conn.plugin_name = desc.name
        if self.on_register is not None:
            try:
                self.on_register(desc.name)
            except Exception:
                conn.plugin_name = None
                self.registry.mark_stopped(desc.name)
                raise
        return self._session_fn().to_json()

    # -- push streams -----------------------------------------------------------

    def wants_debug(self) -> bool:
        with self._lock:
            return any(c.debug_stream for c in self._conns)

    def wants_glyphs(self) -> bool:
        with self._lock:
            return any(c.glyph_stream for c in self._conns)

    def push_debug(self, sample: dict) -> None:
        self._push("debug_stream", {"v": PROTOCOL_VERSION, "op": "debug_sample", **sample})

    def push_glyphs(self, t: float, actors: list[dict]) -> None:
        self._push(
            "glyph_stream",
            {"v": PROTOCOL_VERSION, "op": "glyphs", "t": t, "actors": actors},
        )

    def _push(self, stream_attr: str, doc: dict) -> None:
        with self._lock:
            conns = [c for c in self._conns if getattr(c, stream_attr) and c.push]
        for conn in conns:
            try:
                conn.push(doc)
            except Exception:
                conn.debug_stream = conn.glyph_stream = False


class ControlServer:
    """Serves a ControlHub over a WebSocket endpoint."""

    def __init__(self, hub: ControlHub, host: str = "127.0.0.1", port: int = 0):
        from websockets.sync.server import serve

        self.hub = hub
        self._server = serve(self._handler, host, port)
        self.host, self.port = self._server.socket.getsockname()[:2]
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="control-server", daemon=True
        )
        self._thread.start()

    @property
    def url(self) -> str:
        return f"ws://{self.host}:{self.port}"

    def _handler(self, ws) -> None:
        send_lock = threading.Lock()

        def push(doc: dict) -> None:
            with send_lock:
                ws.send(json.dumps(doc))

        conn = _ConnState(push=push)
        self.hub.attach(conn)
        try:
            for raw in ws:
                try:
                    msg = json.loads(raw)
                except (TypeError, ValueError):
                    msg = None
                reply = self.hub.handle(conn, msg)
                if reply is not None:
                    push(reply)
        except Exception as exc:
            log.debug("control connection ended: %s", exc)
        finally:
            self.hub.detach(conn)

    def close(self) -> None:
        self._server.shutdown()


_PUSH_OPS = ("debug_sample", "glyphs")


class PluginSession:
    """Client side of the control channel: register, heartbeat, request.

    Pushed stream messages (``debug_sample``/``glyphs``) are routed to
    ``on_push`` (or buffered in :attr:`pushed`) so :meth:`request` always
    pairs a request with its own reply.
    """

    def __init__(
        self,
        url: str,
        name: str,
        *,
        heartbeat: bool = True,
        timeout: float = 5.0,
        on_push: Optional[Callable[[dict], None]] = None,
    ):
        from websockets.sync.client import connect

        try:
            self._ws = connect(url, open_timeout=timeout)
        except (OSError, Exception) as exc:
            if isinstance(exc, (ConnectionError, OSError, TimeoutError)):
                raise ServerUnavailable(f"control channel at {url}: {exc}") from exc
            raise
        self.name = name
        self.pushed: list[dict] = []
        self._on_push = on_push
        self._lock = threading.Lock()
        self._timeout = timeout
        self._closed = threading.Event()
        reply = self._request_locked({"v": PROTOCOL_VERSION, "op": "register", "name": name})
        self.info = SessionInfo.from_json(reply)
        self._beat_thread: Optional[threading.Thread] = None
        if heartbeat:
            self._beat_thread = threading.Thread(
                target=self._beat_loop, name=f"heartbeat-{name}", daemon=True
            )
            self._beat_thread.start()

    def request(self, op: str, **params) -> dict:
        """Send one op and return its (non-push) reply; raises on error replies."""
        return self._request_locked({"v": PROTOCOL_VERSION, "op": op, **params})

    def _request_locked(self, msg: dict) -> dict:
        with self._lock:
            self._ws.send(json.dumps(msg))
            while True:
                reply = json.loads(self._ws.recv(timeout=self._timeout))
                if reply.get("op") in _PUSH_OPS:
                    self._handle_push(reply)
                    continue
                break
        if reply.get("op") == "error":
            if reply.get("error") == "NameConflict":
                raise NameConflict(reply.get("message", ""))
            raise ControlError(f"{reply.get('error')}: {reply.get('message', '')}")
        return reply

    def poll_pushes(self, timeout: float = 0.1) -> list[dict]:
        """Drain pushed stream messages that arrived since the last call."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                try:
                    raw = self._ws.recv(timeout=max(0.0, deadline - time.monotonic()))
                except TimeoutError:
                    break
                self._handle_push(json.loads(raw))
        out, self.pushed = self.pushed, []
        return out

    def _handle_push(self, doc: dict) -> None:
        if self._on_push is not None:
            self._on_push(doc)
        else:
            self.pushed.append(doc)

    def _beat_loop(self) -> None:
        while not self._closed.wait(HEARTBEAT_PERIOD):
            try:
                self.request("heartbeat")
            except Exception:
                return

    def close(self) -> None:
        self._closed.set()
        try:
            self._ws.close()
        except Exception:
            pass

    def __enter__(self) -> "PluginSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def register_plugin(control_channel_url: str, plugin_name: str) -> SessionInfo:
    """One-shot registration: join, fetch SessionInfo, leave.

    Closing the connection frees the name (the plugin is marked Stopped), so
    use :class:`PluginSession` for a plugin that stays attached.
    """
    with PluginSession(control_channel_url, plugin_name, heartbeat=False) as session:
        return session.info


# -- protocol schema ------------------------------------------------------------


def _op(op: str, required: dict, optional: Optional[dict] = None) -> dict:
    props = {"v": {"const": PROTOCOL_VERSION}, "op": {"const": op}}
    props.update(required)
    props.update(optional or {})
    return {
        "type": "object",
        "properties": props,
        "required": ["v", "op", *required],
        "additionalProperties": False,
    }


_NUMBER = {"type": "number"}
_POINT = {
    "type": "object",
    "properties": {"x": _NUMBER, "y": _NUMBER},
    "required": ["x", "y"],
    "additionalProperties": False,
}


def control_schema() -> dict:
    """JSON schema for every client->server control message (the UI contract)."""
    scenario_edit_ops = {
        "add_static": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["vehicle", "prop"]},
                "x": _NUMBER,
                "y": _NUMBER,
            },
            "required": ["kind", "x", "y"],
            "additionalProperties": False,
        },
        "add_source": {
            "type": "object",
            "properties": {"x": _NUMBER, "y": _NUMBER, "delay_s": _NUMBER},
            "required": ["x", "y", "delay_s"],
            "additionalProperties": False,
        },
        "add_sink": {
            "type": "object",
            "properties": {"x": _NUMBER, "y": _NUMBER, "radius_m": _NUMBER},
            "required": ["x", "y", "radius_m"],
            "additionalProperties": False,
        },
        "add_flow": {
            "type": "object",
            "properties": {
                "path": {"type": "array", "items": _POINT, "minItems": 2},
                "crowd_size": {"type": "integer", "minimum": 1},
                "respawn_delay_s": _NUMBER,
            },
            "required": ["path", "crowd_size"],
            "additionalProperties": False,
        },
        "set_weather": {
            "type": "object",
            "properties": {
                "cloudiness": _NUMBER,
                "precipitation": _NUMBER,
                "fog_density": _NUMBER,
                "sun_altitude_deg": _NUMBER,
            },
            "additionalProperties": False,
        },
    }
    index_arg = {
        "type": "object",
        "properties": {"index": {"type": "integer", "minimum": 0}},
        "required": ["index"],
        "additionalProperties": False,
    }
    for target in ("static", "source", "sink", "flow"):
        scenario_edit_ops[f"remove_{target}"] = index_arg
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "hilsim control channel requests",
        "description": (
            "Every message a client may send over the control WebSocket. "
            f"Version {PROTOCOL_VERSION}; unknown ops are rejected."
        ),
        "oneOf": [
            _op("register", {"name": {"type": "string", "minLength": 1}}),
            _op("heartbeat", {}),
            _op(
                "set_sensor_enabled",
                {"mount": {"type": "string"}, "enabled": {"type": "boolean"}},
            ),
            _op(
                "scenario_edit",
                {},
                {name: schema for name, schema in scenario_edit_ops.items()},
            ),
            _op("scenario_get", {}),
            _op("sensor_list", {}),
            _op("debug_stream_subscribe", {}),
            _op("glyph_stream_subscribe", {}),
            _op(
                "sync_register",
                {"ids": {"type": "array", "items": {"type": "integer"}, "minItems": 1}},
            ),
        ],
    }


def write_control_schema(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(control_schema(), fh, indent=2, sort_keys=True)
        fh.write("\n")
