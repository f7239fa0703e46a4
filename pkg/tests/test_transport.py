import json
import threading
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from vflpipe.transport import (AGGREGATOR, LABEL_OWNER, Bus, CommStats, Kind, PartyId,
                               ProtocolError, SocketBus, TransportError)

A, B, C = PartyId.client(1), PartyId.client(2), PartyId.client(3)


def bus3(cls=Bus):
    bus = cls(record=True)
    return bus, bus.register(A), bus.register(B), bus.register(C)


def test_party_ids_ordered_and_parse():
    assert sorted([AGGREGATOR, C, A, LABEL_OWNER]) == [A, C, LABEL_OWNER, AGGREGATOR]
    assert str(C) == "client-3"
    assert PartyId.parse("client-12") == PartyId.client(12)
    assert PartyId.parse("aggregator") == AGGREGATOR
    with pytest.raises(ValueError):
        PartyId.client(0)


def test_fresh_bus_zero_stats():
    s = Bus().snapshot_stats()
    assert s.total_bytes == 0 and s.message_count == 0 and s.rounds == 0


def test_accounting_one_message():
    bus, a, b, _ = bus3()
    sid = bus.open_session()
    a.send(B, sid, Kind.DONE, bytes(100))
    s = bus.snapshot_stats()
    assert s.bytes_by_edge[(A, B)] == 100 and s.message_count == 1 and s.total_bytes == 100
    assert b.recv(sid).payload == bytes(100)


def test_fifo_per_session():
    bus, a, b, _ = bus3()
    sid = bus.open_session()
    for i in range(20):
        a.send(B, sid, Kind.DONE, bytes([i]))
    assert [b.recv(sid).payload[0] for _ in range(20)] == list(range(20))


def test_sessions_isolated():
    bus, a, b, _ = bus3()
    s1, s2 = bus.open_session(), bus.open_session()
    a.send(B, s1, Kind.DONE, b"one")
    a.send(B, s2, Kind.DONE, b"two")
    assert b.recv(s2).payload == b"two"
    assert b.recv(s1).payload == b"one"


def test_unregistered_and_closed():
    bus, a, _, _ = bus3()
    sid = bus.open_session()
    with pytest.raises(TransportError):
        a.send(PartyId.client(9), sid, Kind.DONE, b"")
    bus.close_session(sid)
    with pytest.raises(TransportError):
        a.send(B, sid, Kind.DONE, b"")


def test_close_wakes_waiting_reader():
    bus, _, b, _ = bus3()
    sid = bus.open_session()
    errors = []

    def wait():
        try:
            b.recv(sid, timeout=5)
        except TransportError as exc:
            errors.append(exc)

    t = threading.Thread(target=wait)
    t.start()
    bus.close_session(sid)
    t.join(5)
    assert errors and not t.is_alive()


def test_expect_checks_kind_and_sender():
    bus, a, b, c = bus3()
    sid = bus.open_session()
    a.send(B, sid, Kind.BLINDED_SET, b"x")
    with pytest.raises(ProtocolError) as exc:
        b.expect(sid, Kind.DONE)
    assert exc.value.session == sid
    c.send(B, sid, Kind.DONE, b"")
    with pytest.raises(ProtocolError):
        b.expect(sid, Kind.DONE, src=A)


def test_isolation_public_surface():
    # An endpoint's only read path is its own inbox.
    bus, a, b, c = bus3()
    sid = bus.open_session()
    a.send(B, sid, Kind.DONE, b"secret")
    with pytest.raises(TransportError):
        c.recv(sid, timeout=0.05)
    assert b.recv(sid).payload == b"secret"


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.binary(max_size=64)), max_size=40))
def test_conservation_against_shadow_ledger(msgs):
    bus = Bus()
    parties = [PartyId.client(i + 1) for i in range(3)]
    eps = [bus.register(p) for p in parties]
    sid = bus.open_session()
    shadow = Counter()
    for s, d, payload in msgs:
        eps[s].send(parties[d], sid, Kind.DONE, payload)
        shadow[(parties[s], parties[d])] += len(payload)
    stats = bus.snapshot_stats()
    assert stats.total_bytes == sum(shadow.values())
    assert {k: v for k, v in stats.bytes_by_edge.items() if v} == {k: v for k, v in shadow.items() if v}
    assert stats.message_count == len(msgs)


def test_concurrent_snapshot_equals_session_ledgers():
    bus = Bus(record=True)
    parties = [PartyId.client(i) for i in range(1, 9)]
    eps = {p: bus.register(p) for p in parties}
    sessions = [bus.open_session() for _ in range(4)]

    def worker(k):
        src, dst = parties[2 * k], parties[2 * k + 1]
        for i in range(200):
            eps[src].send(dst, sessions[k], Kind.DONE, bytes(i % 37))

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    mid = bus.snapshot_stats()
    for t in threads:
        t.join()
    total = bus.snapshot_stats()
    assert mid.total_bytes <= total.total_bytes
    per_session = sum(bus.session_stats(s).total_bytes for s in sessions)
    assert total.total_bytes == per_session
    # single-threaded replay of the recorded transcript
    assert total.total_bytes == sum(len(e.payload) for e in bus.transcript)


def test_stats_json_roundtrip_and_arith():
    bus, a, b, _ = bus3()
    sid = bus.open_session()
    before = bus.snapshot_stats()
    a.send(B, sid, Kind.DONE, bytes(10))
    b.send(A, sid, Kind.DONE, bytes(5))
    bus.begin_round()
    after = bus.snapshot_stats()
    diff = after - before
    assert diff.total_bytes == 15 and diff.rounds == 1
    obj = json.loads(after.dumps())
    assert set(obj) == {"edges", "messages", "rounds", "wall_ns"}
    assert CommStats.from_json(obj).bytes_by_edge == after.bytes_by_edge
    assert (before + diff).total_bytes == after.total_bytes


def test_socket_bus_same_contract():
    bus, a, b, _ = bus3(SocketBus)
    try:
        sid = bus.open_session()
        payloads = [bytes([i]) * i for i in range(1, 30)]
        for p in payloads:
            a.send(B, sid, Kind.DONE, p)
        assert [b.recv(sid, timeout=5).payload for _ in payloads] == payloads
        assert bus.snapshot_stats().total_bytes == sum(map(len, payloads))
    finally:
        bus.shutdown()
