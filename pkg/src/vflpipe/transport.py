"""Message bus between participant actors with exact byte accounting.

Parties register on a :class:`Bus` and get back an :class:`Endpoint`; the
endpoint is the only way to read an inbox, so a party can never see
envelopes addressed to someone else. Only payload bytes are counted, never
framing or headers.
"""

from __future__ import annotations

import enum
import itertools
import json
import queue
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from functools import total_ordering


class TransportError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    """A peer sent something the protocol state machine did not expect."""

    def __init__(self, session: int, message: str):
        super().__init__(f"session {session}: {message}")
        self.session = session


_ROLE_ORDER = {"client": 0, "label-owner": 1, "aggregator": 2, "key-server": 3}


@total_ordering
@dataclass(frozen=True)
class PartyId:
    role: str
    index: int = 0

    def __post_init__(self):
        if self.role not in _ROLE_ORDER:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "client" and self.index < 1:
            raise ValueError("client indices start at 1")

    @classmethod
    def client(cls, m: int) -> "PartyId":
        return cls("client", m)

    def __lt__(self, other: "PartyId") -> bool:
        return (_ROLE_ORDER[self.role], self.index) < (_ROLE_ORDER[other.role], other.index)

    def __str__(self) -> str:
        return f"client-{self.index}" if self.role == "client" else self.role

    @classmethod
    def parse(cls, text: str) -> "PartyId":
        if text.startswith("client-"):
            return cls.client(int(text[len("client-"):]))
        return cls(text)


AGGREGATOR = PartyId("aggregator")
KEY_SERVER = PartyId("key-server")
LABEL_OWNER = PartyId("label-owner")


class Kind(str, enum.Enum):
    # RSA blind-signature PSI
    PK_ANNOUNCE = "PK_ANNOUNCE"
    BLINDED_SET = "BLINDED_SET"
    SIGNED_SET = "SIGNED_SET+SENDER_DIGESTS"
    # DH-OPRF PSI
    EVALUATED_SET = "EVALUATED_SET"
    SENDER_MAPPED_SET = "SENDER_MAPPED_SET"
    DONE = "DONE"
    # orchestration
    REQUEST = "REQUEST"
    STATUS = "STATUS"
    KEY_PUBLIC = "KEY_PUBLIC"
    KEY_PRIVATE = "KEY_PRIVATE"
    SEALED_RESULT = "SEALED_RESULT"
    # coreset construction
    CT_MESSAGE = "CT_MESSAGE"
    CT_BATCH = "CT_BATCH"
    CORESET_IDS = "CORESET_IDS"
    CORESET_WEIGHTS = "CORESET_WEIGHTS"
    # split training
    ACTIVATIONS = "ACTIVATIONS"
    TOP_OUTPUT = "TOP_OUTPUT"
    GRAD_TOP = "GRAD_TOP"
    GRAD_BOTTOM = "GRAD_BOTTOM"
    KNN_QUERY = "KNN_QUERY"
    KNN_PARTIAL = "KNN_PARTIAL"


@dataclass(frozen=True)
class Envelope:
    src: PartyId
    dst: PartyId
    session: int
    kind: Kind
    payload: bytes


@dataclass
class CommStats:
    bytes_by_edge: dict = field(default_factory=dict)
    message_count: int = 0
    rounds: int = 0
    wall_ns: int = 0

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_edge.values())

    def bytes_from(self, party: PartyId) -> int:
        return sum(b for (s, _), b in self.bytes_by_edge.items() if s == party)

    def copy(self) -> "CommStats":
        return CommStats(dict(self.bytes_by_edge), self.message_count, self.rounds, self.wall_ns)

    def __sub__(self, earlier: "CommStats") -> "CommStats":
        edges = {}
        for edge, b in self.bytes_by_edge.items():
            diff = b - earlier.bytes_by_edge.get(edge, 0)
            if diff:
                edges[edge] = diff
        return CommStats(edges, self.message_count - earlier.message_count,
                         self.rounds - earlier.rounds, self.wall_ns - earlier.wall_ns)

    def __add__(self, other: "CommStats") -> "CommStats":
        edges = Counter(self.bytes_by_edge)
        edges.update(other.bytes_by_edge)
        return CommStats(dict(edges), self.message_count + other.message_count,
                         self.rounds + other.rounds, self.wall_ns + other.wall_ns)

    def to_json(self) -> dict:
        edges = sorted(self.bytes_by_edge.items(), key=lambda kv: (kv[0][0], kv[0][1]))
        return {
            "edges": [{"from": str(s), "to": str(d), "bytes": b} for (s, d), b in edges],
            "messages": self.message_count,
            "rounds": self.rounds,
            "wall_ns": self.wall_ns,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CommStats":
        edges = {(PartyId.parse(e["from"]), PartyId.parse(e["to"])): e["bytes"] for e in obj["edges"]}
        return cls(edges, obj["messages"], obj["rounds"], obj["wall_ns"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


class Endpoint:
    """A registered party's handle: send anywhere, receive only its own mail."""

    def __init__(self, bus: "Bus", party: PartyId):
        self._bus = bus
        self.party = party

    def send(self, dst: PartyId, session: int, kind: Kind, payload: bytes) -> int:
        return self._bus._deliver(Envelope(self.party, dst, session, Kind(kind), bytes(payload)))

    def recv(self, session: int, timeout: float | None = None) -> Envelope:
        return self._bus._take(self.party, session, timeout)

    def expect(self, session: int, kind: Kind, src: PartyId | None = None,
               timeout: float | None = None) -> Envelope:
        env = self.recv(session, timeout)
        if env.kind != kind or (src is not None and env.src != src):
            raise ProtocolError(session, f"{self.party} expected {kind.value} from {src}, "
                                         f"got {env.kind.value} from {env.src}")
        return env

    def __repr__(self):
        return f"Endpoint({self.party})"


class Bus:
    """In-process bus; FIFO per (sender, receiver, session).

    With ``record=True`` every delivered envelope is kept in ``transcript``
    so tests can audit payloads after a run.
    """

    default_timeout = 60.0

    def __init__(self, record: bool = False):
        self._lock = threading.Lock()
        self._parties: set[PartyId] = set()
        self._inboxes: dict[tuple[PartyId, int], queue.Queue] = {}
        self._open: set[int] = set()
        self._session_ids = itertools.count(1)
        self._edges: Counter = Counter()
        self._session_edges: dict[int, Counter] = {}
        self._session_messages: Counter = Counter()
        self._messages = 0
        self._rounds = 0
        self._t0 = time.monotonic_ns()
        self.record = record
        self.transcript: list[Envelope] = []

    def register(self, party: PartyId) -> Endpoint:
        with self._lock:
            if party in self._parties:
                raise TransportError(f"{party} already registered")
            self._parties.add(party)
        return Endpoint(self, party)

    @property
    def parties(self) -> frozenset:
        return frozenset(self._parties)

    def open_session(self) -> int:
        with self._lock:
            sid = next(self._session_ids)
            self._open.add(sid)
            self._session_edges[sid] = Counter()
        return sid

    def close_session(self, session: int) -> None:
        """Close a session; parties blocked on it wake with TransportError."""
        with self._lock:
            self._open.discard(session)
            boxes = [self._inboxes.pop(k) for k in [k for k in self._inboxes if k[1] == session]]
        for box in boxes:
            box.put(_CLOSED)

    def begin_round(self) -> None:
        with self._lock:
            self._rounds += 1

    def _inbox(self, party: PartyId, session: int) -> queue.Queue:
        key = (party, session)
        box = self._inboxes.get(key)
        if box is None:
            box = self._inboxes[key] = queue.Queue()
        return box

    def _deliver(self, env: Envelope) -> int:
        with self._lock:
            for p in (env.src, env.dst):
                if p not in self._parties:
                    raise TransportError(f"unknown party {p}")
            if env.session not in self._open:
                raise TransportError(f"session {env.session} is not open")
            n = len(env.payload)
            self._edges[(env.src, env.dst)] += n
            self._session_edges[env.session][(env.src, env.dst)] += n
            self._session_messages[env.session] += 1
            self._messages += 1
            receipt = self._messages
            if self.record:
                self.transcript.append(env)
            box = self._inbox(env.dst, env.session)
        self._enqueue(box, env)
        return receipt

    def _enqueue(self, box: queue.Queue, env: Envelope) -> None:
        box.put(env)

    def _take(self, party: PartyId, session: int, timeout: float | None) -> Envelope:
        with self._lock:
            if session not in self._open:
                raise TransportError(f"session {session} is not open")
            box = self._inbox(party, session)
        try:
            env = box.get(timeout=self.default_timeout if timeout is None else timeout)
        except queue.Empty:
            raise TransportError(f"{party}: timed out waiting on session {session}") from None
        if env is _CLOSED:
            raise TransportError(f"session {session} closed while {party} was waiting")
        return env

    def snapshot_stats(self) -> CommStats:
        with self._lock:
            return CommStats(dict(self._edges), self._messages, self._rounds,
                             time.monotonic_ns() - self._t0)

    def session_stats(self, session: int) -> CommStats:
        with self._lock:
            return CommStats(dict(self._session_edges.get(session, {})),
                             self._session_messages[session], 0, 0)

    def session_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._session_edges)


_CLOSED = object()

_HEADER = struct.Struct("<QI")


class SocketBus(Bus):
    """Same contract as :class:`Bus`, but each envelope crosses a loopback socket.

    Every registered party owns a socket pair; a reader thread decodes frames
    off the wire and files them into the party's session inboxes.
    """

    def __init__(self, record: bool = False):
        super().__init__(record)
        self._wires: dict[PartyId, tuple[socket.socket, socket.socket]] = {}
        self._pending: dict[int, tuple[queue.Queue, Envelope]] = {}
        self._frame_ids = itertools.count(1)
        self._write_lock = threading.Lock()

    def register(self, party: PartyId) -> Endpoint:
        ep = super().register(party)
        tx, rx = socket.socketpair()
        self._wires[party] = (tx, rx)
        threading.Thread(target=self._reader, args=(rx,), daemon=True,
                         name=f"wire-{party}").start()
        return ep

    def _enqueue(self, box: queue.Queue, env: Envelope) -> None:
        frame_id = next(self._frame_ids)
        self._pending[frame_id] = (box, env)
        tx, _ = self._wires[env.dst]
        with self._write_lock:
            tx.sendall(_HEADER.pack(frame_id, len(env.payload)) + env.payload)

    def _reader(self, rx: socket.socket) -> None:
        buf = bytearray()
        while True:
            try:
                chunk = rx.recv(1 << 16)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while len(buf) >= _HEADER.size:
                frame_id, n = _HEADER.unpack_from(buf)
                if len(buf) < _HEADER.size + n:
                    break
                payload = bytes(buf[_HEADER.size:_HEADER.size + n])
                del buf[:_HEADER.size + n]
                box, env = self._pending.pop(frame_id)
                box.put(Envelope(env.src, env.dst, env.session, env.kind, payload))

    def shutdown(self) -> None:
        for tx, rx in self._wires.values():
            tx.close()
            rx.close()
