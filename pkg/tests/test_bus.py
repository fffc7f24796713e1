"""Event bus: codec, broker semantics, durability, TCP access."""

from __future__ import annotations

import random
import time

import pytest

from citytb.bus.broker import Broker
from citytb.bus.events import (
    Channel,
    DecodeError,
    Kind,
    ManagementEvent,
    PayloadField,
    Topic,
    TopicMismatch,
    UnknownEventType,
    decode_event,
    encode_event,
    KIND_BYTES,
    KIND_STR,
    KIND_U64,
    make_event,
    new_correlation_id,
    text,
    u64,
)
from citytb.bus.netbus import BusClient, BusServer

REG_REQ = Topic(Channel.REGISTRATION, Kind.REQUEST)
REG_REP = Topic(Channel.REGISTRATION, Kind.REPLY)
MON_REQ = Topic(Channel.MONITORING, Kind.REQUEST)


def _event(event_type="NODE_REG_REQUEST", at=0, fields=()):
    return make_event(event_type, at, fields)


# -- codec -------------------------------------------------------------------


def _random_fields(rng: random.Random) -> list[PayloadField]:
    fields = []
    for _ in range(rng.randrange(0, 6)):
        tag = rng.randrange(1, 40)
        choice = rng.randrange(4)
        if choice == 0:
            fields.append(u64(tag, rng.randrange(0, 2**63)))
        elif choice == 1:
            fields.append(PayloadField(tag, KIND_STR, "v" * rng.randrange(0, 20)))
        elif choice == 2:
            fields.append(PayloadField(tag, KIND_BYTES, rng.randbytes(rng.randrange(0, 30))))
        else:
            fields.append(PayloadField(tag, 2, rng.uniform(-1e6, 1e6)))
    return fields


def test_codec_round_trip_randomized():
    rng = random.Random(9)
    types = ["NODE_REG_REQUEST", "HELLO", "ADD_SENSOR_REQ", "NODE_STATUS_REQUEST", "GW_REG_REPLY"]
    for _ in range(1000):
        ev = make_event(rng.choice(types), rng.randrange(0, 2**40), _random_fields(rng))
        assert decode_event(encode_event(ev)) == ev


def test_decode_rejects_unknown_event_type():
    ev = ManagementEvent("NOT_A_TYPE", new_correlation_id(), 0, ())
    frame = encode_event(ev)
    with pytest.raises(UnknownEventType):
        decode_event(frame)


def test_decode_rejects_truncated_frame():
    frame = encode_event(_event())
    with pytest.raises(DecodeError):
        decode_event(frame[:-3])


def test_unknown_payload_fields_survive_re_encode():
    # a "newer peer" adds fields with tags we know nothing about
    ev = make_event(
        "HELLO",
        7,
        [u64(1, 3), PayloadField(3999, KIND_BYTES, b"\x01\x02"), text(4000, "future")],
    )
    frame = encode_event(ev)
    decoded = decode_event(frame)
    assert encode_event(decoded) == frame
    assert decoded.get(3999) == b"\x01\x02"


# -- broker ------------------------------------------------------------------


def test_publish_delivers_one_copy_to_each_subscriber():
    broker = Broker()
    got = {name: [] for name in "abc"}
    for name in got:
        broker.subscribe(name, REG_REQ, lambda ev, n=name: got[n].append(ev))
    ev = _event()
    broker.publish(REG_REQ, ev)
    assert all(copies == [ev] for copies in got.values())


def test_publish_to_wrong_topic_is_rejected():
    broker = Broker()
    with pytest.raises(TopicMismatch):
        broker.publish(MON_REQ, _event("NODE_REG_REQUEST"))


def test_publish_unregistered_type_rejected():
    broker = Broker()
    ev = ManagementEvent("BOGUS", new_correlation_id(), 0, ())
    with pytest.raises(UnknownEventType):
        broker.publish(REG_REQ, ev)


def test_per_publisher_order_preserved():
    broker = Broker()
    seen = []
    broker.subscribe("watcher", MON_REQ, seen.append)
    rng = random.Random(5)
    counters = {p: 0 for p in range(4)}
    for _ in range(1000):
        p = rng.randrange(4)
        broker.publish(
            MON_REQ,
            _event("NODE_STATUS_REQUEST", fields=[u64(1, p), u64(2, counters[p])]),
        )
        counters[p] += 1
    per_publisher = {p: [] for p in range(4)}
    for ev in seen:
        per_publisher[int(ev.get(1))].append(int(ev.get(2)))
    for p, seqs in per_publisher.items():
        assert seqs == list(range(counters[p]))


def test_durable_subscriber_replays_missed_events_in_order():
    broker = Broker()
    got = []
    sub = broker.subscribe("console", REG_REQ, got.append, durable=True)
    broker.publish(REG_REQ, _event(fields=[u64(1, 0)]))
    sub.close()
    published = [_event(fields=[u64(1, i)]) for i in range(1, 6)]
    for ev in published:
        broker.publish(REG_REQ, ev)
    assert len(got) == 1
    broker.subscribe("console", REG_REQ, got.append, durable=True)
    assert [int(e.get(1)) for e in got] == [0, 1, 2, 3, 4, 5]


def test_non_durable_subscriber_gets_no_replay():
    broker = Broker()
    got = []
    sub = broker.subscribe("casual", REG_REQ, got.append)
    sub.close()
    for i in range(5):
        broker.publish(REG_REQ, _event(fields=[u64(1, i)]))
    broker.subscribe("casual", REG_REQ, got.append)
    assert got == []


def test_filter_excludes_other_types():
    broker = Broker()
    got = []
    broker.subscribe("gwonly", REG_REQ, got.append, event_filter=["GW_REG_REQUEST"])
    broker.publish(REG_REQ, _event("NODE_REG_REQUEST"))
    gw = _event("GW_REG_REQUEST")
    broker.publish(REG_REQ, gw)
    assert got == [gw]


def test_reply_requires_prior_request():
    broker = Broker()
    with pytest.raises(TopicMismatch):
        broker.publish(REG_REP, _event("NODE_REG_REPLY"))
    req = _event("NODE_REG_REQUEST")
    broker.publish(REG_REQ, req)
    rep = make_event("NODE_REG_REPLY", 1, [], req.correlation_id)
    broker.publish(REG_REP, rep)  # now legal


def test_redelivery_dedup_by_identity():
    broker = Broker()
    seen_ids = set()
    deduped = []

    def consume(ev: ManagementEvent) -> None:
        if ev.identity() in seen_ids:
            return
        seen_ids.add(ev.identity())
        deduped.append(ev)

    broker.subscribe("worker", REG_REQ, consume, durable=True)
    events = [_event(fields=[u64(1, i)]) for i in range(10)]
    for ev in events:
        broker.publish(REG_REQ, ev)
    # simulate an at-least-once wrinkle: requeue everything not yet acked,
    # then re-publish delivery of acked history via redeliver()
    broker._cursors.clear()  # pretend acks were lost
    broker.redeliver("worker", REG_REQ)
    assert [int(e.get(1)) for e in deduped] == list(range(10))


def test_broker_restart_preserves_durable_backlog(tmp_path):
    store = str(tmp_path / "bus")
    broker = Broker(persist_dir=store)
    got = []
    sub = broker.subscribe("console", REG_REQ, got.append, durable=True)
    broker.publish(REG_REQ, _event(fields=[u64(1, 0)]))
    sub.close()
    for i in range(1, 51):
        broker.publish(REG_REQ, _event(fields=[u64(1, i)]))
    broker.close()

    reborn = Broker(persist_dir=store)
    replay = []
    reborn.subscribe("console", REG_REQ, replay.append, durable=True)
    assert [int(e.get(1)) for e in replay] == list(range(1, 51))


# -- TCP ---------------------------------------------------------------------


def _wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


def test_tcp_publish_subscribe_round_trip():
    broker = Broker()
    server = BusServer(broker, port=0)
    server.start()
    host, port = server.address
    got = []
    sub_client = BusClient(host, port, "tcp-sub")
    pub_client = BusClient(host, port, "tcp-pub")
    try:
        sub_client.subscribe(REG_REQ, got.append, durable=True)
        assert _wait_for(sub_client.connected)
        time.sleep(0.1)  # let the subscribe land before publishing
        pub_client.publish(_event(fields=[u64(1, 42)]))
        assert _wait_for(lambda: len(got) == 1)
        assert int(got[0].get(1)) == 42
    finally:
        sub_client.close()
        pub_client.close()
        server.stop()


def test_tcp_client_buffers_across_outage():
    broker = Broker()
    server = BusServer(broker, port=0)
    server.start()
    host, port = server.address
    client = BusClient(host, port, "agent-gw1")
    try:
        client.publish(_event("HELLO", fields=[u64(1, 0)]))
        assert _wait_for(lambda: len(broker.topic_log(MON_REQ)) == 1)
        server.stop()  # outage begins
        time.sleep(0.05)
        for i in range(1, 3):
            client.publish(_event("HELLO", fields=[u64(1, i)]))
        time.sleep(0.3)
        assert len(broker.topic_log(MON_REQ)) == 1
        server2 = BusServer(broker, host=host, port=port)
        server2.start()
        try:
            assert _wait_for(lambda: len(broker.topic_log(MON_REQ)) == 3)
            seqs = [int(e.get(1)) for e in broker.topic_log(MON_REQ)]
            assert seqs == [0, 1, 2]
        finally:
            server2.stop()
    finally:
        client.close()
