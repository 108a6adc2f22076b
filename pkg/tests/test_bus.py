"""Pub/sub bus QoS semantics and the binary wire framing."""
from __future__ import annotations

import hashlib
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hilsim.bus import (
    Bus,
    BusClosed,
    Envelope,
    QosMismatch,
    Reliability,
    TopicSpec,
)
from hilsim.wire import BadMagic, BadVersion, Decoder, encode_envelope


def _spec(name="/t", rel=Reliability.RELIABLE, depth=10, latched=False):
    return TopicSpec(name, rel, depth, latched)


def test_topic_spec_validation():
    with pytest.raises(ValueError):
        TopicSpec("/t", depth=0)
    with pytest.raises(ValueError):
        TopicSpec("no-slash")


def test_advertise_idempotent_and_mismatch():
    bus = Bus()
    bus.advertise(_spec())
    bus.advertise(_spec())  # identical: fine
    with pytest.raises(QosMismatch):
        bus.advertise(_spec(depth=2))
    assert [s.name for s in bus.topics()] == ["/t"]


def test_publish_before_subscribe_delivers_nothing():
    bus = Bus()
    pub = bus.advertise(_spec())
    assert pub.publish(0.0, b"x") == 0


def test_subscribe_then_publish_one_delivery():
    bus = Bus()
    pub = bus.advertise(_spec())
    sub = bus.subscribe("/t")
    pub.publish(1.5, b"hello")
    env = sub.recv(timeout=1.0)
    assert env == Envelope("/t", 1, 1.5, b"hello")
    assert sub.recv(timeout=0.01) is None


def test_reliable_fanout_everyone_gets_every_message():
    bus = Bus()
    pub = bus.advertise(_spec())
    subs = [bus.subscribe("/t") for _ in range(2)]
    for k in range(5):
        pub.publish(float(k), bytes([k]))
    for sub in subs:
        got = [sub.recv(0.5) for _ in range(5)]
        assert [e.seq for e in got] == [1, 2, 3, 4, 5]
        assert [e.payload for e in got] == [bytes([k]) for k in range(5)]


def test_best_effort_depth_one_keeps_newest():
    bus = Bus()
    pub = bus.advertise(_spec(rel=Reliability.BEST_EFFORT, depth=1))
    sub = bus.subscribe("/t")
    for k in range(3):
        pub.publish(float(k), f"m{k}".encode())
    env = sub.recv(0.1)
    assert env.payload == b"m2"
    assert sub.drops == 2
    assert bus.topic_drops("/t") == 2


def test_seq_gaps_equal_drop_counter():
    bus = Bus()
    pub = bus.advertise(_spec(rel=Reliability.BEST_EFFORT, depth=3))
    sub = bus.subscribe("/t")
    seqs = []
    for batch in range(2):
        for k in range(5):
            pub.publish(float(k), b"")
        seqs += [e.seq for e in sub.drain()]
    # every seq not seen was a counted drop
    assert seqs == sorted(seqs)
    assert max(seqs) - len(seqs) == sub.drops == 4


def test_best_effort_never_blocks_stalled_subscriber():
    bus = Bus()
    pub = bus.advertise(_spec(rel=Reliability.BEST_EFFORT, depth=1))
    bus.subscribe("/t")  # never drained
    t0 = time.perf_counter()
    for k in range(10_000):
        pub.publish(0.0, b"payload")
    elapsed = time.perf_counter() - t0
    assert elapsed < 0.1


def test_reliable_publisher_blocks_until_consumed():
    bus = Bus()
    pub = bus.advertise(_spec(depth=1))
    sub = bus.subscribe("/t")
    pub.publish(0.0, b"a")  # fills the queue

    blocked_for = {}

    def second_publish():
        t0 = time.perf_counter()
        pub.publish(0.0, b"b")
        blocked_for["dt"] = time.perf_counter() - t0

    t = threading.Thread(target=second_publish)
    t.start()
    time.sleep(0.15)
    assert t.is_alive()  # still waiting for room
    assert sub.recv(0.5).payload == b"a"
    t.join(timeout=2.0)
    assert not t.is_alive()
    assert blocked_for["dt"] >= 0.1
    assert sub.recv(0.5).payload == b"b"


def test_closing_subscription_releases_blocked_publisher():
    bus = Bus()
    pub = bus.advertise(_spec(depth=1))
    sub = bus.subscribe("/t")
    pub.publish(0.0, b"a")
    t = threading.Thread(target=lambda: pub.publish(0.0, b"b"))
    t.start()
    time.sleep(0.05)
    sub.close()
    t.join(timeout=2.0)
    assert not t.is_alive()


def test_latched_topic_delivers_to_late_subscriber():
    bus = Bus()
    pub = bus.advertise(_spec("/tf_static", latched=True))
    pub.publish(0.0, b"tree-v1")
    pub.publish(1.0, b"tree-v2")
    late = bus.subscribe("/tf_static")
    env = late.recv(0.1)
    assert env.payload == b"tree-v2"
    assert env.seq == 2


def test_latent_subscription_woken_by_later_advertise():
    bus = Bus()
    sub = bus.subscribe("/later", Reliability.RELIABLE, 4)
    pub = bus.advertise(_spec("/later"))
    pub.publish(0.5, b"arrived")
    assert sub.recv(0.5).payload == b"arrived"


def test_closed_bus_rejects_operations():
    bus = Bus()
    pub = bus.advertise(_spec())
    bus.close()
    with pytest.raises(BusClosed):
        pub.publish(0.0, b"x")
    with pytest.raises(BusClosed):
        bus.advertise(_spec("/u"))
    with pytest.raises(BusClosed):
        bus.subscribe("/t")


def test_concurrent_publishers_keep_seq_strictly_increasing():
    bus = Bus()
    pub = bus.advertise(_spec(depth=4000))
    sub = bus.subscribe("/t")

    def blast():
        for _ in range(500):
            pub.publish(0.0, b"")

    threads = [threading.Thread(target=blast) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seqs = [e.seq for e in sub.drain()]
    assert len(seqs) == 2000
    assert seqs == sorted(seqs) and len(set(seqs)) == 2000


# --- wire framing -----------------------------------------------------------


def test_frame_layout_header_is_24_bytes():
    raw = encode_envelope(Envelope("/t", 1, 0.0, b""))
    # header + u16 topic length + 2-byte topic name
    assert len(raw) == 24 + 2 + 2


@settings(max_examples=200)
@given(
    st.text(min_size=1, max_size=40).map(lambda s: "/" + s.replace("\x00", "")),
    st.integers(0, 2**63),
    st.floats(0, 1e9),
    st.binary(max_size=2048),
)
def test_wire_round_trip_preserves_bytes(topic, seq, stamp, payload):
    env = Envelope(topic, seq, stamp, payload)
    decoder = Decoder()
    out = decoder.feed(encode_envelope(env))
    assert len(out) == 1
    got = out[0]
    assert got == env
    assert hashlib.sha256(got.payload).digest() == hashlib.sha256(payload).digest()


@given(st.integers(1, 7), st.integers(0, 60))
def test_decoder_handles_arbitrary_chunking(chunk, extra):
    envs = [Envelope("/a/b", k, k * 0.1, bytes(range(k % 13))) for k in range(1, 21)]
    raw = b"".join(encode_envelope(e) for e in envs)
    decoder = Decoder()
    got = []
    for i in range(0, len(raw), chunk):
        got.extend(decoder.feed(raw[i : i + chunk]))
    assert got == envs


def test_decoder_rejects_bad_magic_and_version():
    raw = bytearray(encode_envelope(Envelope("/t", 1, 0.0, b"x")))
    bad = raw.copy()
    bad[0] ^= 0xFF
    with pytest.raises(BadMagic):
        Decoder().feed(bytes(bad))
    bad = raw.copy()
    bad[2] = 99
    with pytest.raises(BadVersion):
        Decoder().feed(bytes(bad))


def test_decoder_waits_for_partial_frame():
    raw = encode_envelope(Envelope("/t", 7, 3.0, b"abcdef"))
    decoder = Decoder()
    assert decoder.feed(raw[:10]) == []
    out = decoder.feed(raw[10:])
    assert out == [Envelope("/t", 7, 3.0, b"abcdef")]
