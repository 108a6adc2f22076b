"""Binary framing for envelopes crossing a TCP socket.

Frame layout, little-endian throughout:

    u16 magic   u16 version   u64 seq   f64 stamp   u32 payload_len   (24 B)
    u16 topic_len   topic (UTF-8)   payload

The decoder is incremental: feed arbitrary byte chunks, get back complete
envelopes in order.
"""
from __future__ import annotations

import struct

from .bus import Envelope

MAGIC = 0x4853
VERSION = 1

_HEADER = struct.Struct("<HHQdI")
_U16 = struct.Struct("<H")

MAX_TOPIC_LEN = 512
MAX_PAYLOAD_LEN = 64 * 1024 * 1024


class WireError(Exception):
    pass


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class FrameTooLarge(WireError):
    pass


def encode_envelope(env: Envelope) -> bytes:
    topic = env.topic.encode("utf-8")
    if len(topic) > MAX_TOPIC_LEN:
        raise FrameTooLarge(f"topic too long: {len(topic)} bytes")
    if len(env.payload) > MAX_PAYLOAD_LEN:
        raise FrameTooLarge(f"payload too long: {len(env.payload)} bytes")
    return b"".join(
        (
            _HEADER.pack(MAGIC, VERSION, env.seq, env.stamp, len(env.payload)),
            _U16.pack(len(topic)),
            topic,
            env.payload,
        )
    )


class Decoder:
    """Streaming frame decoder; tolerant of any chunking."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Envelope]:
        self._buf.extend(chunk)
        out: list[Envelope] = []
        while True:
            env = self._try_decode()
            if env is None:
                return out
            out.append(env)

    def _try_decode(self) -> Envelope | None:
        buf = self._buf
        need = _HEADER.size + _U16.size
        if len(buf) < need:
            return None
        magic, version, seq, stamp, payload_len = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise BadMagic(f"expected 0x{MAGIC:04x}, got 0x{magic:04x}")
        if version != VERSION:
            raise BadVersion(f"unsupported frame version {version}")
        if payload_len > MAX_PAYLOAD_LEN:
            raise FrameTooLarge(f"payload length {payload_len}")
        (topic_len,) = _U16.unpack_from(buf, _HEADER.size)
        if topic_len > MAX_TOPIC_LEN:
            raise FrameTooLarge(f"topic length {topic_len}")
        total = need + topic_len + payload_len
        if len(buf) < total:
            return None
        topic = bytes(buf[need : need + topic_len]).decode("utf-8")
        payload = bytes(buf[need + topic_len : total])
        del buf[:total]
        return Envelope(topic, seq, stamp, payload)
